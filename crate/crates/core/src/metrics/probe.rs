//! Property prediction from frozen slots.
//!
//! Slots are matched to visible objects by mask IoU, then a small MLP is
//! trained to read one property off the matched slot.

use candle_core::{Device, Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{hungarian, SegMasks};
use crate::error::{Error, Result};
use crate::nn::{self, Linear, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::scenegen::{ObjectSpec, Shape, PALETTE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    Position,
    Shape,
    Color,
}

impl std::str::FromStr for Property {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "position" => Ok(Self::Position),
            "shape" => Ok(Self::Shape),
            "color" => Ok(Self::Color),
            other => Err(Error::Usage(format!("unknown property `{other}` (expected position | shape | color)"))),
        }
    }
}

impl Property {
    pub fn n_classes(self) -> Option<usize> {
        match self {
            Property::Position => None,
            Property::Shape => Some(Shape::ALL.len()),
            Property::Color => Some(PALETTE.len()),
        }
    }

    pub fn target(self, obj: &ObjectSpec) -> Target {
        match self {
            Property::Position => Target::Value(vec![obj.position.0, obj.position.1]),
            Property::Shape => Target::Class(obj.shape.index()),
            Property::Color => Target::Class(obj.color),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Value(Vec<f32>),
}

/// Pair each visible object with a distinct slot by maximal total IoU.
///
/// `gt` is on the same grid as `pred`, with object `k` labelled `k + 1`.
pub fn match_slots_to_objects(pred: &SegMasks, gt: &[u16], n_slots: usize, objects: &[usize]) -> Vec<(usize, usize)> {
    if objects.is_empty() || n_slots == 0 {
        return Vec::new();
    }
    let mut inter = vec![vec![0u32; n_slots]; objects.len()];
    let mut obj_area = vec![0u32; objects.len()];
    let mut slot_area = vec![0u32; n_slots];
    for (&p, &g) in pred.labels.iter().zip(gt) {
        slot_area[p as usize] += 1;
        if let Some(k) = objects.iter().position(|&o| g as usize == o + 1) {
            obj_area[k] += 1;
            inter[k][p as usize] += 1;
        }
    }
    let cost: Vec<Vec<f64>> = (0..objects.len())
        .map(|k| {
            (0..n_slots)
                .map(|n| {
                    let u = obj_area[k] + slot_area[n] - inter[k][n];
                    1.0 - if u > 0 { inter[k][n] as f64 / u as f64 } else { 0.0 }
                })
                .collect()
        })
        .collect();
    hungarian(&cost).into_iter().map(|(k, n)| (objects[k], n)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub layers: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { hidden: 196, layers: 4, steps: 1500, batch: 64, lr: 1e-3, train_fraction: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub property: Property,
    /// Accuracy for categorical properties, mean squared error for position.
    pub score: f64,
    pub metric: String,
    pub n_train: usize,
    pub n_test: usize,
}

struct ProbeMlp {
    layers: Vec<Linear>,
}

impl ProbeMlp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&m)?;
    Ok(s.broadcast_sub(&s.exp()?.sum_keepdim(D::Minus1)?.log()?)?)
}

fn to_tensors(rows: &[&(Vec<f32>, Target)], out_dim: usize, dev: &Device) -> Result<(Tensor, Tensor)> {
    let d = rows[0].0.len();
    let x: Vec<f32> = rows.iter().flat_map(|r| r.0.iter().copied()).collect();
    let mut y = Vec::with_capacity(rows.len() * out_dim);
    for r in rows {
        match &r.1 {
            Target::Class(c) => y.extend((0..out_dim).map(|k| (k == *c) as u8 as f32)),
            Target::Value(v) => y.extend_from_slice(v),
        }
    }
    Ok((Tensor::from_vec(x, (rows.len(), d), dev)?, Tensor::from_vec(y, (rows.len(), out_dim), dev)?))
}

/// Train a probe on a shuffled split of `examples` and score it on the rest.
pub fn fit_probe(examples: &[(Vec<f32>, Target)], property: Property, cfg: &ProbeConfig, seed: u64) -> Result<ProbeResult> {
    if examples.len() < 2 {
        return Err(Error::Dataset(format!("probe needs at least 2 matched objects, got {}", examples.len())));
    }
    if cfg.layers < 1 {
        return Err(Error::Config("probe needs at least one layer".into()));
    }
    let dev = Device::Cpu;
    let out_dim = match property.n_classes() {
        Some(k) => k,
        None => 2,
    };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = ((examples.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, examples.len() - 1);
    let train: Vec<&(Vec<f32>, Target)> = order[..n_train].iter().map(|&i| &examples[i]).collect();
    let test: Vec<&(Vec<f32>, Target)> = order[n_train..].iter().map(|&i| &examples[i]).collect();
    let d = examples[0].0.len();

    let store = ParamStore::new(seed, &dev);
    let dims: Vec<usize> = std::iter::once(d)
        .chain(std::iter::repeat(cfg.hidden).take(cfg.layers - 1))
        .chain(std::iter::once(out_dim))
        .collect();
    let mlp = ProbeMlp {
        layers: dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&store.root().pp(format!("l{i}")), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?,
    };
    let vars = store.vars();
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let loss_of = |pred: &Tensor, y: &Tensor| -> Result<Tensor> {
        match property.n_classes() {
            Some(_) => Ok((log_softmax(pred)? * y)?.sum(1)?.mean_all()?.neg()?),
            None => Ok((pred - y)?.sqr()?.mean_all()?),
        }
    };
    let mut idx: Vec<usize> = (0..train.len()).collect();
    let mut cursor = idx.len();
    for _ in 0..cfg.steps {
        if cursor + cfg.batch.min(idx.len()) > idx.len() {
            idx.shuffle(&mut rng);
            cursor = 0;
        }
        let take = cfg.batch.min(idx.len());
        let batch: Vec<&(Vec<f32>, Target)> = idx[cursor..cursor + take].iter().map(|&i| train[i]).collect();
        cursor += take;
        let (x, y) = to_tensors(&batch, out_dim, &dev)?;
        let loss = loss_of(&mlp.forward(&x)?, &y)?;
        opt.apply(&vars, &loss.backward()?)?;
    }

    let (x, y) = to_tensors(&test, out_dim, &dev)?;
    let pred = mlp.forward(&x)?;
    let (score, metric) = match property.n_classes() {
        Some(_) => {
            let p = pred.argmax(D::Minus1)?.to_vec1::<u32>()?;
            let t = y.argmax(D::Minus1)?.to_vec1::<u32>()?;
            let hits = p.iter().zip(&t).filter(|(a, b)| a == b).count();
            (hits as f64 / t.len() as f64, "accuracy")
        }
        None => (nn::scalar(&(pred - y)?.sqr()?.mean_all()?)?, "mse"),
    };
    Ok(ProbeResult { property, score, metric: metric.into(), n_train: train.len(), n_test: test.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn quick() -> ProbeConfig {
        ProbeConfig { hidden: 32, steps: 400, ..ProbeConfig::default() }
    }

    #[test]
    fn one_hot_inputs_are_perfectly_separable() {
        let examples: Vec<(Vec<f32>, Target)> = (0..200)
            .map(|i| {
                let c = i % 8;
                ((0..8).map(|k| (k == c) as u8 as f32).collect(), Target::Class(c))
            })
            .collect();
        let r = fit_probe(&examples, Property::Color, &quick(), 0).unwrap();
        assert_eq!(r.metric, "accuracy");
        assert_eq!(r.score, 1.0);
    }

    #[test]
    fn random_inputs_score_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let examples: Vec<(Vec<f32>, Target)> = (0..2000)
            .map(|_| ((0..8).map(|_| rng.random::<f32>()).collect(), Target::Class(rng.random_range(0..4))))
            .collect();
        let r = fit_probe(&examples, Property::Shape, &ProbeConfig { steps: 100, ..quick() }, 0).unwrap();
        // 400 test points, chance 1/4: standard error ≈ 0.022
        assert!((r.score - 0.25).abs() < 0.1, "accuracy {}", r.score);
    }

    #[test]
    fn linear_position_code_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let examples: Vec<(Vec<f32>, Target)> = (0..500)
            .map(|_| {
                let (x, y) = (rng.random::<f32>(), rng.random::<f32>());
                (vec![x + y, x - y, 0.5 * x, 2.0 * y], Target::Value(vec![x, y]))
            })
            .collect();
        let r = fit_probe(&examples, Property::Position, &ProbeConfig { steps: 1500, ..quick() }, 0).unwrap();
        assert_eq!(r.metric, "mse");
        assert!(r.score < 1e-3, "mse {}", r.score);
    }

    #[test]
    fn matching_follows_overlap() {
        // objects 0 and 2 visible; slot 3 covers object 0, slot 1 covers object 2
        let pred = SegMasks { labels: vec![3, 3, 1, 1, 0, 0], grid: (2, 3) };
        let gt = vec![1, 1, 3, 3, 0, 0];
        let mut m = match_slots_to_objects(&pred, &gt, 4, &[0, 2]);
        m.sort_unstable();
        assert_eq!(m, vec![(0, 3), (2, 1)]);
    }
}
