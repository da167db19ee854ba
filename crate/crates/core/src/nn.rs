//! Parameter storage and the small set of layers the models are built from.
//!
//! All tensors are channels-last. Parameters are created from a seeded
//! ChaCha stream so that `(config, seed)` fixes every initial weight.
//! A [`FrozenParams`] view hands out detached copies of the same storage:
//! modules built from it read the live weights but never receive gradient.

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f32),
    /// Uniform on `[-bound, bound]`.
    Uniform(f32),
    Normal(f32),
}

pub struct ParamStore {
    vars: RefCell<BTreeMap<String, Var>>,
    rng: RefCell<ChaCha8Rng>,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        use rand::SeedableRng;
        Self {
            vars: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            device: device.clone(),
        }
    }

    pub fn root(&self) -> Scope<'_> {
        Scope { src: Source::Store(self), prefix: String::new() }
    }

    /// All variables ordered by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars.borrow().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.borrow().get(name).cloned()
    }

    pub fn frozen(&self) -> FrozenParams {
        FrozenParams {
            tensors: self
                .vars
                .borrow()
                .iter()
                .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.borrow().values().map(|v| v.elem_count()).sum()
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn get_or_init(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.borrow().get(&name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} exists with shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = self.rng.borrow_mut();
        let data: Vec<f32> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) if b > 0.0 => (0..n).map(|_| rng.random_range(-b..b)).collect(),
            Init::Uniform(_) => vec![0.0; n],
            Init::Normal(s) => (0..n).map(|_| s * rng.sample::<f32, _>(StandardNormal)).collect(),
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.vars.borrow_mut().insert(name, var);
        Ok(t)
    }
}

/// Detached snapshot handles sharing storage with a [`ParamStore`].
pub struct FrozenParams {
    tensors: BTreeMap<String, Tensor>,
}

impl FrozenParams {
    pub fn root(&self) -> Scope<'_> {
        Scope { src: Source::Frozen(self), prefix: String::new() }
    }
}

#[derive(Clone, Copy)]
enum Source<'a> {
    Store(&'a ParamStore),
    Frozen(&'a FrozenParams),
}

/// A named position in the parameter tree; modules build themselves from one.
#[derive(Clone)]
pub struct Scope<'a> {
    src: Source<'a>,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope { src: self.src, prefix }
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = self.pp(name).prefix;
        match self.src {
            Source::Store(store) => store.get_or_init(full, shape, init),
            Source::Frozen(frozen) => {
                let t = frozen
                    .tensors
                    .get(&full)
                    .ok_or_else(|| Error::Contract(format!("frozen view has no parameter {full}")))?;
                if t.dims() != shape {
                    return Err(Error::Shape(format!("frozen parameter {full} has shape {:?}", t.dims())));
                }
                Ok(t.clone())
            }
        }
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self.src, Source::Frozen(_))
    }
}

fn fan_in_bound(fan_in: usize) -> f32 {
    1.0 / (fan_in as f32).sqrt()
}

/// Apply `f` to the last dimension after flattening leading dimensions.
fn over_rows(x: &Tensor, f: impl FnOnce(&Tensor) -> candle_core::Result<Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let last = *dims.last().ok_or_else(|| Error::Shape("scalar input to layer".into()))?;
    let rows = x.elem_count() / last.max(1);
    let y = f(&x.reshape((rows, last))?)?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = y.dim(1)?;
    Ok(y.reshape(out_dims)?)
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(s, d_in, d_out, Init::Uniform(fan_in_bound(d_in)), true)
    }

    pub fn no_bias(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(s, d_in, d_out, Init::Uniform(fan_in_bound(d_in)), false)
    }

    pub fn zeros(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(s, d_in, d_out, Init::Const(0.0), true)
    }

    pub fn with_init(s: &Scope, d_in: usize, d_out: usize, init: Init, bias: bool) -> Result<Self> {
        let weight = s.get(&[d_in, d_out], "weight", init)?;
        let bias = if bias {
            Some(s.get(&[d_out], "bias", Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.dims().last() != Some(&self.d_in()) {
            return Err(Error::Shape(format!(
                "linear expects trailing width {}, got {:?}",
                self.d_in(),
                x.dims()
            )));
        }
        over_rows(x, |rows| {
            let y = rows.matmul(&self.weight)?;
            match &self.bias {
                Some(b) => y.broadcast_add(b),
                None => Ok(y),
            }
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.get(&[dim], "gamma", Init::Const(1.0))?,
            beta: s.get(&[dim], "beta", Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// 3×3 same-padding convolution on `(B, H, W, C)` via im2col and one matmul.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    weight: Tensor,
    bias: Tensor,
    c_in: usize,
}

impl Conv3x3 {
    pub fn new(s: &Scope, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            weight: s.get(&[9 * c_in, c_out], "weight", Init::Uniform(fan_in_bound(9 * c_in)))?,
            bias: s.get(&[c_out], "bias", Init::Const(0.0))?,
            c_in,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.c_in {
            return Err(Error::Shape(format!("conv expects {} channels, got {c}", self.c_in)));
        }
        let xp = x.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?;
        let mut cols = Vec::with_capacity(9);
        for dy in 0..3 {
            for dx in 0..3 {
                cols.push(xp.narrow(1, dy, h)?.narrow(2, dx, w)?);
            }
        }
        let col = Tensor::cat(&cols, D::Minus1)?.reshape((b * h * w, 9 * c))?;
        let y = col.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        Ok(y.reshape((b, h, w, ()))?)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(s: &Scope, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self { fc1: Linear::new(&s.pp("fc1"), d_in, hidden)?, fc2: Linear::new(&s.pp("fc2"), hidden, d_out)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}

/// Multi-head scaled dot-product attention from `x` (queries) to `ctx` (keys/values).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(s: &Scope, dim: usize, ctx_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::no_bias(&s.pp("q"), dim, dim)?,
            k: Linear::no_bias(&s.pp("k"), ctx_dim, dim)?,
            v: Linear::no_bias(&s.pp("v"), ctx_dim, dim)?,
            o: Linear::new(&s.pp("o"), dim, dim)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, c / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    pub fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let dh = c / self.heads;
        let q = self.split(&self.q.forward(x)?)?;
        let k = self.split(&self.k.forward(ctx)?)?;
        let v = self.split(&self.v.forward(ctx)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, c))?;
        self.o.forward(&out)
    }
}

/// Gated recurrent unit cell operating on `(..., D)` rows.
#[derive(Clone, Debug)]
pub struct GruCell {
    w_ih: Linear,
    w_hh: Linear,
    dim: usize,
}

impl GruCell {
    pub fn new(s: &Scope, d_in: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            w_ih: Linear::new(&s.pp("ih"), d_in, 3 * dim)?,
            w_hh: Linear::new(&s.pp("hh"), dim, 3 * dim)?,
            dim,
        })
    }

    /// Returns the next hidden state; gate order is (reset, update, candidate).
    pub fn forward(&self, input: &Tensor, hidden: &Tensor) -> Result<Tensor> {
        let gi = self.w_ih.forward(input)?;
        let gh = self.w_hh.forward(hidden)?;
        let d = self.dim;
        let r = sigmoid(&(gi.narrow(D::Minus1, 0, d)? + gh.narrow(D::Minus1, 0, d)?)?)?;
        let z = sigmoid(&(gi.narrow(D::Minus1, d, d)? + gh.narrow(D::Minus1, d, d)?)?)?;
        let n = (gi.narrow(D::Minus1, 2 * d, d)? + (&r * gh.narrow(D::Minus1, 2 * d, d)?)?)?.tanh()?;
        let keep = (&z * hidden)?;
        let one_minus_z = z.affine(-1.0, 1.0)?;
        Ok((keep + (one_minus_z * n)?)?)
    }
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Logistic function written through `tanh` so neither tail overflows.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x * 0.5)?.tanh()?.affine(0.5, 0.5)?)
}

/// `(B, H, W, C)` → `(B, H/p, W/p, p·p·C)`.
pub fn space_to_depth(x: &Tensor, p: usize) -> Result<Tensor> {
    if p == 1 {
        return Ok(x.clone());
    }
    let (b, h, w, c) = x.dims4()?;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("{h}×{w} not divisible by patch {p}")));
    }
    Ok(x.reshape((b * h / p, p, w / p, p * c))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, h / p, w / p, p * p * c))?)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, p: usize) -> Result<Tensor> {
    if p == 1 {
        return Ok(x.clone());
    }
    let (b, hp, wp, cc) = x.dims4()?;
    let c = cc / (p * p);
    Ok(x.reshape((b * hp, wp, p, p * c))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, hp * p, wp * p, c))?)
}

/// 2×2 mean pooling on `(B, H, W, C)`.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b * h / 2, 2, w / 2, 2, c))?
        .sum_keepdim(3)?
        .sum_keepdim(1)?
        .affine(0.25, 0.0)?
        .reshape((b, h / 2, w / 2, c))?)
}

/// Nearest-neighbour ×2 upsampling on `(B, H, W, C)`.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b * h, 1, w, 1, c))?
        .broadcast_as((b * h, 2, w, 2, c))?
        .contiguous()?
        .reshape((b, 2 * h, 2 * w, c))?)
}

/// Standard-normal tensor drawn from `rng`.
pub fn randn(rng: &mut impl Rng, shape: &[usize], device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, device)?)
}

/// Sinusoidal embedding of integer timesteps, `(B,)` → `(B, dim)`.
pub fn timestep_embedding(t: &[usize], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let arg = step as f64 * freq;
            data.push(if i < half { arg.sin() } else { arg.cos() } as f32);
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), device)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn conv_matches_direct_sum() {
        let store = ParamStore::new(3, &dev());
        let conv = Conv3x3::new(&store.root().pp("c"), 2, 3).unwrap();
        let x = randn(&mut rand::rng(), &[1, 4, 5, 2], &dev()).unwrap();
        let y = conv.forward(&x).unwrap().squeeze(0).unwrap().to_vec3::<f32>().unwrap();
        let xv = x.squeeze(0).unwrap().to_vec3::<f32>().unwrap();
        let w = store.var("c.weight").unwrap().as_tensor().to_vec2::<f32>().unwrap();
        for i in 0..4 {
            for j in 0..5 {
                for o in 0..3 {
                    let mut acc = 0f32;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (ii, jj) = (i as i32 + dy - 1, j as i32 + dx - 1);
                            if ii < 0 || jj < 0 || ii >= 4 || jj >= 5 {
                                continue;
                            }
                            for c in 0..2 {
                                let row = ((dy * 3 + dx) as usize) * 2 + c;
                                acc += xv[ii as usize][jj as usize][c] * w[row][o];
                            }
                        }
                    }
                    assert!((acc - y[i][j][o]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn space_to_depth_round_trips() {
        let x = randn(&mut rand::rng(), &[2, 4, 6, 3], &dev()).unwrap();
        let y = space_to_depth(&x, 2).unwrap();
        assert_eq!(y.dims(), &[2, 2, 3, 12]);
        let back = depth_to_space(&y, 2).unwrap();
        let diff = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
        // patch contents: top-left 2×2 block of channel 0 lands in the first patch
        let xs = x.get(0).unwrap().to_vec3::<f32>().unwrap();
        let ys = y.get(0).unwrap().to_vec3::<f32>().unwrap();
        assert_eq!(ys[0][0][0], xs[0][0][0]);
        assert_eq!(ys[0][0][3], xs[0][1][0]);
        assert_eq!(ys[0][0][6], xs[1][0][0]);
    }

    #[test]
    fn pool_and_upsample_are_adjoint_shapes() {
        let x = randn(&mut rand::rng(), &[1, 4, 4, 2], &dev()).unwrap();
        let up = upsample2(&avg_pool2(&x).unwrap()).unwrap();
        assert_eq!(up.dims(), x.dims());
        let pooled_twice = avg_pool2(&up).unwrap();
        let diff = (pooled_twice - avg_pool2(&x).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() < 1e-6);
    }

    #[test]
    fn sigmoid_is_stable_in_the_tails() {
        let x = Tensor::new(&[-200f32, 0.0, 200.0], &dev()).unwrap();
        let v = Var::from_tensor(&x).unwrap();
        let y = sigmoid(v.as_tensor()).unwrap();
        assert_eq!(y.to_vec1::<f32>().unwrap(), vec![0.0, 0.5, 1.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        let gv = g.get(v.as_tensor()).unwrap().to_vec1::<f32>().unwrap();
        assert!(gv.iter().all(|v| v.is_finite()));
        assert!((gv[1] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn frozen_view_shares_storage_without_gradient() {
        let store = ParamStore::new(0, &dev());
        let lin = Linear::new(&store.root().pp("l"), 2, 2).unwrap();
        let frozen = store.frozen();
        let lin_f = Linear::new(&frozen.root().pp("l"), 2, 2).unwrap();
        let x = Tensor::ones((1, 2), DType::F32, &dev()).unwrap();
        let var = store.var("l.weight").unwrap();
        var.set(&Tensor::full(2f32, (2, 2), &dev()).unwrap()).unwrap();
        let y = lin_f.forward(&x).unwrap();
        assert_eq!(y.to_vec2::<f32>().unwrap(), vec![vec![4.0, 4.0]]);
        let grads = y.sum_all().unwrap().backward().unwrap();
        assert!(grads.get(var.as_tensor()).is_none());
        let grads = lin.forward(&x).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(grads.get(var.as_tensor()).is_some());
    }

    #[test]
    fn same_seed_gives_same_weights() {
        let a = ParamStore::new(11, &dev());
        let b = ParamStore::new(11, &dev());
        Linear::new(&a.root().pp("x"), 3, 4).unwrap();
        Linear::new(&b.root().pp("x"), 3, 4).unwrap();
        let wa = a.var("x.weight").unwrap().as_tensor().to_vec2::<f32>().unwrap();
        let wb = b.var("x.weight").unwrap().as_tensor().to_vec2::<f32>().unwrap();
        assert_eq!(wa, wb);
    }
}
