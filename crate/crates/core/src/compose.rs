//! Slot mixing between two images, the attention-mask regularizer and the
//! weighted total objective.

use candle_core::{Device, Tensor};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn;
use crate::slotcore::{AttentionMap, SlotSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixStrategy {
    Random,
    SharedInit,
}

/// How one composite row was assembled from its two sources.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MixSpec {
    /// Sorted indices into the `2N` union; `i < N` is slot `i` of image 1,
    /// `i >= N` is slot `i - N` of image 2.
    Random { picks: Vec<usize> },
    /// Slot `i` of the composite comes from image 1 if `i ∈ i1`, else image 2.
    SharedInit { i1: Vec<usize>, i2: Vec<usize> },
}

impl MixSpec {
    /// Source slot indices taken from image 1 and from image 2.
    pub fn parts(&self, n: usize) -> (Vec<usize>, Vec<usize>) {
        match self {
            MixSpec::Random { picks } => (
                picks.iter().copied().filter(|&p| p < n).collect(),
                picks.iter().filter(|&&p| p >= n).map(|&p| p - n).collect(),
            ),
            MixSpec::SharedInit { i1, i2 } => (i1.clone(), i2.clone()),
        }
    }

    /// Row indices into `cat([S1, S2], slot axis)` in composite order.
    pub fn gather(&self, n: usize) -> Vec<usize> {
        match self {
            MixSpec::Random { picks } => picks.clone(),
            MixSpec::SharedInit { i1, .. } => (0..n).map(|i| if i1.contains(&i) { i } else { n + i }).collect(),
        }
    }
}

/// A composite slot set together with the per-row recipe.
#[derive(Debug, Clone)]
pub struct Mix {
    pub slots: SlotSet,
    pub specs: Vec<MixSpec>,
}

fn check_pair(s1: &SlotSet, s2: &SlotSet) -> Result<(usize, usize, usize)> {
    let (b1, n1, d1) = s1.slots.dims3()?;
    let (b2, n2, d2) = s2.slots.dims3()?;
    if (b1, n1, d1) != (b2, n2, d2) {
        return shape_err(format!("cannot mix slot sets {:?} and {:?}", s1.slots.dims(), s2.slots.dims()));
    }
    Ok((b1, n1, d1))
}

/// Assemble the composite for given recipes; the output rows are copies of
/// source rows, never arithmetic on them.
pub fn apply_mix(s1: &SlotSet, s2: &SlotSet, specs: &[MixSpec]) -> Result<SlotSet> {
    let (b, n, d) = check_pair(s1, s2)?;
    if specs.len() != b {
        return shape_err(format!("{} mix specs for batch {b}", specs.len()));
    }
    let mut idx = Vec::with_capacity(b * n);
    for (row, spec) in specs.iter().enumerate() {
        let g = spec.gather(n);
        if g.len() != n || g.iter().any(|&i| i >= 2 * n) {
            return Err(Error::Contract(format!("mix spec {spec:?} does not select {n} of {} slots", 2 * n)));
        }
        idx.extend(g.iter().map(|&i| (row * 2 * n + i) as u32));
    }
    let union = Tensor::cat(&[&s1.slots, &s2.slots], 1)?.reshape((b * 2 * n, d))?;
    let idx = Tensor::from_vec(idx, b * n, s1.slots.device())?;
    SlotSet::new(union.index_select(&idx, 0)?.reshape((b, n, d))?)
}

/// Pick `N` of the `2N` slots uniformly without replacement, per row.
pub fn mix_random(s1: &SlotSet, s2: &SlotSet, rng: &mut impl Rng) -> Result<Mix> {
    let (b, n, _) = check_pair(s1, s2)?;
    let specs: Vec<MixSpec> = (0..b)
        .map(|_| {
            let mut picks = index::sample(rng, 2 * n, n).into_vec();
            picks.sort_unstable();
            MixSpec::Random { picks }
        })
        .collect();
    Ok(Mix { slots: apply_mix(s1, s2, &specs)?, specs })
}

/// Uniform partition of `0..n` into two parts, both nonempty when `n >= 2`.
pub fn sample_partition(rng: &mut impl Rng, n: usize) -> (Vec<usize>, Vec<usize>) {
    loop {
        let (i1, i2): (Vec<usize>, Vec<usize>) = (0..n).partition(|_| rng.random_bool(0.5));
        if n < 2 || (!i1.is_empty() && !i2.is_empty()) {
            return (i1, i2);
        }
    }
}

/// Index-preserving mix of two encodings that started from the same `S⁽⁰⁾`.
pub fn mix_shared_init(s1: &SlotSet, s2: &SlotSet, rng: &mut impl Rng) -> Result<Mix> {
    let (b, n, _) = check_pair(s1, s2)?;
    match (&s1.init_id, &s2.init_id) {
        (Some(a), Some(c)) if a == c => {}
        _ => {
            return Err(Error::Contract(
                "shared-init mixing requires both slot sets to come from the same initial draw".into(),
            ))
        }
    }
    let specs: Vec<MixSpec> = (0..b)
        .map(|_| {
            let (i1, i2) = sample_partition(rng, n);
            MixSpec::SharedInit { i1, i2 }
        })
        .collect();
    Ok(Mix { slots: apply_mix(s1, s2, &specs)?, specs })
}

pub fn mix(strategy: MixStrategy, s1: &SlotSet, s2: &SlotSet, rng: &mut impl Rng) -> Result<Mix> {
    match strategy {
        MixStrategy::Random => mix_random(s1, s2, rng),
        MixStrategy::SharedInit => mix_shared_init(s1, s2, rng),
    }
}

/// Per-pixel squared error summed over channels, area-pooled to `grid`,
/// and cut from the graph: `(B, H, W, 3)` pair → `(B, M)`.
pub fn pooled_error(x: &Tensor, x_c: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (b, h, w, _) = x.dims4()?;
    if x_c.dims() != x.dims() {
        return shape_err(format!("image {:?} vs composite {:?}", x.dims(), x_c.dims()));
    }
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
        return shape_err(format!("cannot pool {h}×{w} onto a {gh}×{gw} grid"));
    }
    let (ph, pw) = (h / gh, w / gw);
    let e = (x.detach() - x_c.detach())?.sqr()?.sum(3)?;
    Ok(e.reshape((b, gh, ph, gw, pw))?.mean(4)?.mean(2)?.reshape((b, gh * gw))?)
}

fn column_mask(rows: &[Vec<usize>], n: usize, device: &Device) -> Result<(Tensor, Vec<f32>)> {
    let mut mask = vec![0f32; rows.len() * n];
    let mut counts = Vec::with_capacity(rows.len());
    for (r, cols) in rows.iter().enumerate() {
        for &c in cols {
            mask[r * n + c] = 1.0;
        }
        counts.push(cols.len() as f32);
    }
    Ok((Tensor::from_vec(mask, (rows.len(), 1, n), device)?, counts))
}

/// Attention-mask regularizer.
///
/// With `e_k` the stop-gradient error between `x_k` and the composite, each
/// image contributes the mean over locations and over its selected slot
/// columns of `A_k[m, n] · e_k[m]`; rows are then averaged over the batch.
/// Gradient reaches only the attention maps.
pub fn reg_loss(
    a1: &AttentionMap,
    a2: &AttentionMap,
    x1: &Tensor,
    x2: &Tensor,
    x_c: &Tensor,
    specs: &[MixSpec],
    grid: (usize, usize),
) -> Result<Tensor> {
    let (b, m, n) = a1.weights.dims3()?;
    if a2.weights.dims() != [b, m, n] {
        return shape_err(format!("attention maps {:?} and {:?} differ", a1.weights.dims(), a2.weights.dims()));
    }
    if m != grid.0 * grid.1 || specs.len() != b {
        return shape_err(format!("attention over {m} locations vs grid {grid:?}, {} specs for batch {b}", specs.len()));
    }
    let dev = a1.weights.device();
    let (p1, p2): (Vec<_>, Vec<_>) = specs.iter().map(|s| s.parts(n)).unzip();
    let mut total = Tensor::zeros((), candle_core::DType::F32, dev)?;
    for (a, x, parts) in [(a1, x1, &p1), (a2, x2, &p2)] {
        let e = pooled_error(x, x_c, grid)?.unsqueeze(2)?;
        let (mask, counts) = column_mask(parts, n, dev)?;
        let denom: Vec<f32> = counts.iter().map(|&c| if c > 0.0 { 1.0 / (c * m as f32) } else { 0.0 }).collect();
        let denom = Tensor::from_vec(denom, b, dev)?;
        let per_row = a.weights.broadcast_mul(&e)?.broadcast_mul(&mask)?.sum((1, 2))?;
        total = (total + (per_row * denom)?.mean_all()?)?;
    }
    Ok(total)
}

/// Mean squared reconstruction error.
pub fn recon_loss(x_hat: &Tensor, x: &Tensor) -> Result<Tensor> {
    if x_hat.dims() != x.dims() {
        return shape_err(format!("reconstruction {:?} vs target {:?}", x_hat.dims(), x.dims()));
    }
    Ok((x_hat - x)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lambdas {
    pub prior: f64,
    pub diff: f64,
    pub recon: f64,
    pub reg: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self { prior: 1.0, diff: 1.0, recon: 1.0, reg: 0.25 }
    }
}

impl Lambdas {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("prior", self.prior), ("diff", self.diff), ("recon", self.recon), ("reg", self.reg)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("lambda_{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub prior: f64,
    pub diff: f64,
    pub recon: f64,
    pub reg: f64,
    pub total: f64,
    pub lambdas: Lambdas,
}

impl LossBreakdown {
    pub fn from_values(prior: f64, diff: f64, recon: f64, reg: f64, lambdas: Lambdas) -> Result<Self> {
        for (term, value) in [("prior", prior), ("diff", diff), ("recon", recon), ("reg", reg)] {
            if !value.is_finite() {
                return Err(Error::NonFinite { term: term.into(), value });
            }
        }
        let total = lambdas.prior * prior + lambdas.diff * diff + lambdas.recon * recon + lambdas.reg * reg;
        Ok(Self { prior, diff, recon, reg, total, lambdas })
    }
}

/// Weighted sum of the four scalar terms, as a differentiable tensor plus
/// the logged values. Any non-finite term aborts with its name.
///
/// Terms with a zero weight are logged but left out of the graph, so their
/// parameters see no gradient at all rather than a zero one.
pub fn total_loss(prior: &Tensor, diff: &Tensor, recon: &Tensor, reg: &Tensor, lambdas: &Lambdas) -> Result<(Tensor, LossBreakdown)> {
    let breakdown = LossBreakdown::from_values(
        nn::scalar(prior)?,
        nn::scalar(diff)?,
        nn::scalar(recon)?,
        nn::scalar(reg)?,
        *lambdas,
    )?;
    let mut total = Tensor::zeros((), prior.dtype(), prior.device())?;
    for (term, lambda) in [(prior, lambdas.prior), (diff, lambdas.diff), (recon, lambdas.recon), (reg, lambdas.reg)] {
        if lambda != 0.0 {
            total = (total + (term * lambda)?)?;
        }
    }
    Ok((total, breakdown))
}
