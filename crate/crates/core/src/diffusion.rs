//! DDPM forward process, denoising loss, the score-distillation prior term
//! and ancestral sampling.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, with `ᾱ_t = Π_{i≤t}(1 − β_i)`.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoders::Denoiser;
use crate::error::{shape_err, Error, Result};
use crate::nn;
use crate::slotcore::SlotSet;

/// Smallest `ᾱ_t` for which the one-step inversion is attempted.
pub const TWEEDIE_MIN_ALPHA_BAR: f64 = 1e-8;

/// Choice of the per-timestep loss weight `w(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightFn {
    #[default]
    One,
    /// `β_t`, the per-step noise variance of the ancestral sampler.
    Sigma2,
    OneMinusAlphaBar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    pub weight_fn: WeightFn,
}

/// Linear β ramp from `beta_start` to `beta_end` over `t_steps` steps.
pub fn make_schedule(t_steps: usize, beta_start: f64, beta_end: f64, weight_fn: WeightFn) -> Result<NoiseSchedule> {
    if t_steps < 2 {
        return Err(Error::Param(format!("schedule needs T >= 2, got {t_steps}")));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Param(format!("need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let betas: Vec<f64> = (0..t_steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
        .collect();
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alpha_bars, weight_fn })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(1000, 1e-4, 0.02, WeightFn::One).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            return Err(Error::Range(format!("timestep {t} outside 1..={}", self.len())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check(t)?])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn weight(&self, t: usize) -> Result<f64> {
        Ok(match self.weight_fn {
            WeightFn::One => {
                self.check(t)?;
                1.0
            }
            WeightFn::Sigma2 => self.beta(t)?,
            WeightFn::OneMinusAlphaBar => 1.0 - self.alpha_bar(t)?,
        })
    }

    /// `(B, 1, 1, 1)` column of `f(t_b)` for broadcasting over images.
    /// `(B, 1, 1, 1)` coefficients in the dtype and device of `like`.
    fn per_row(&self, t: &[usize], like: &Tensor, f: impl Fn(usize) -> Result<f64>) -> Result<Tensor> {
        let v = t.iter().map(|&s| f(s)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::from_vec(v, (t.len(), 1, 1, 1), like.device())?.to_dtype(like.dtype())?)
    }
}

/// Sampling window for the prior term, as fractions of `T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimestepRange {
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for TimestepRange {
    fn default() -> Self {
        Self { t_min: 0.02, t_max: 0.5 }
    }
}

impl TimestepRange {
    pub fn new(t_min: f64, t_max: f64) -> Result<Self> {
        let r = Self { t_min, t_max };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(Error::Param(format!("need 0 <= t_min < t_max <= 1, got {} and {}", self.t_min, self.t_max)));
        }
        Ok(())
    }

    /// Inclusive integer window within `1..=t_steps`.
    pub fn steps(&self, t_steps: usize) -> (usize, usize) {
        let lo = ((self.t_min * t_steps as f64).ceil() as usize).max(1);
        let hi = ((self.t_max * t_steps as f64).floor() as usize).clamp(lo, t_steps);
        (lo, hi)
    }
}

/// Anything that predicts the noise in `x_t` given slots.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, t: &[usize], slots: &SlotSet) -> Result<Tensor>;
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x_t: &Tensor, t: &[usize], slots: &SlotSet) -> Result<Tensor> {
        self.denoise(x_t, t, slots)
    }
}

/// `x_t = √ᾱ_t · x + √(1 − ᾱ_t) · ε`, one timestep per batch row.
pub fn forward_corrupt(x: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if x.dims() != eps.dims() {
        return shape_err(format!("x {:?} vs eps {:?}", x.dims(), eps.dims()));
    }
    if x.dims()[0] != t.len() {
        return shape_err(format!("{} timesteps for batch {}", t.len(), x.dims()[0]));
    }
    let a = schedule.per_row(t, x, |s| Ok(schedule.alpha_bar(s)?.sqrt()))?;
    let b = schedule.per_row(t, x, |s| Ok((1.0 - schedule.alpha_bar(s)?).sqrt()))?;
    Ok((x.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

/// `x̂_0 = (x_t − √(1 − ᾱ_t) · ε̂) / √ᾱ_t`.
pub fn tweedie_one_step(x_t: &Tensor, t: &[usize], eps_hat: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if let Some(&bad) = t.iter().find(|&&s| schedule.alpha_bar(s).map(|a| a < TWEEDIE_MIN_ALPHA_BAR).unwrap_or(false)) {
        return Err(Error::Range(format!("alpha_bar at t={bad} is below {TWEEDIE_MIN_ALPHA_BAR}, inversion is unstable")));
    }
    let inv = schedule.per_row(t, x_t, |s| Ok(1.0 / schedule.alpha_bar(s)?.sqrt()))?;
    let b = schedule.per_row(t, x_t, |s| Ok((1.0 - schedule.alpha_bar(s)?).sqrt()))?;
    Ok((x_t - eps_hat.broadcast_mul(&b)?)?.broadcast_mul(&inv)?)
}

fn uniform_steps(rng: &mut impl Rng, b: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(lo..=hi)).collect()
}

/// Denoising objective with `t ~ U{1..T}` and fresh `ε`.
pub fn diffusion_loss(
    denoiser: &impl NoisePredictor,
    x: &Tensor,
    slots: &SlotSet,
    rng: &mut impl Rng,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let b = x.dims()[0];
    let t = uniform_steps(rng, b, 1, schedule.len());
    let eps = nn::randn(rng, x.dims(), x.device())?;
    diffusion_loss_at(denoiser, x, slots, &t, &eps, schedule)
}

/// `mean_{b,pixels} w(t_b) · (ε̂ − ε)²` for given `t` and `ε`.
pub fn diffusion_loss_at(
    denoiser: &impl NoisePredictor,
    x: &Tensor,
    slots: &SlotSet,
    t: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let x_t = forward_corrupt(x, t, eps, schedule)?;
    let eps_hat = denoiser.predict(&x_t, t, slots)?;
    let w = schedule.per_row(t, x, |s| schedule.weight(s))?;
    Ok((eps_hat - eps)?.sqr()?.broadcast_mul(&w)?.mean_all()?)
}

/// How the detached residual is reduced against `x_c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorReduction {
    /// Divide by the number of elements, matching the scale of the denoising loss.
    #[default]
    Mean,
    /// The plain inner product `Σ r ⊙ x_c`.
    Sum,
}

/// Score-distillation term for a composite image `x_c`.
///
/// The residual `r = w(t)(ε̂ − ε)` is computed without gradient, so the
/// gradient of `Σ r ⊙ x_c` with respect to anything upstream of `x_c` is
/// exactly `r · ∂x_c/∂θ`; the denoiser Jacobian never appears.
pub fn prior_gradient_loss(
    denoiser: &impl NoisePredictor,
    x_c: &Tensor,
    slots_c: &SlotSet,
    rng: &mut impl Rng,
    schedule: &NoiseSchedule,
    range: &TimestepRange,
    reduction: PriorReduction,
) -> Result<Tensor> {
    range.validate()?;
    let (lo, hi) = range.steps(schedule.len());
    let t = uniform_steps(rng, x_c.dims()[0], lo, hi);
    let eps = nn::randn(rng, x_c.dims(), x_c.device())?;
    prior_gradient_loss_at(denoiser, x_c, slots_c, &t, &eps, schedule, reduction)
}

pub fn prior_gradient_loss_at(
    denoiser: &impl NoisePredictor,
    x_c: &Tensor,
    slots_c: &SlotSet,
    t: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
    reduction: PriorReduction,
) -> Result<Tensor> {
    if !x_c.track_op() {
        return Err(Error::Contract(
            "composite image is not connected to any trainable parameter; the prior term would be a constant".into(),
        ));
    }
    let x_t = forward_corrupt(&x_c.detach(), t, eps, schedule)?;
    let eps_hat = denoiser.predict(&x_t, t, &slots_c.detach())?;
    let w = schedule.per_row(t, x_c, |s| schedule.weight(s))?;
    let residual = (eps_hat - eps)?.broadcast_mul(&w)?.detach();
    let inner = (residual * x_c)?.sum_all()?;
    Ok(match reduction {
        PriorReduction::Sum => inner,
        PriorReduction::Mean => (inner / x_c.elem_count() as f64)?,
    })
}

/// Ancestral sampling over `steps` evenly spaced timesteps from `T` down to 1.
///
/// Each step predicts `x̂_0`, clips it to the image range and draws from the
/// Gaussian posterior `q(x_prev | x_t, x̂_0)` of the respaced chain.
pub fn sample(
    denoiser: &impl NoisePredictor,
    slots: &SlotSet,
    image_size: (usize, usize),
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if steps == 0 || steps > schedule.len() {
        return Err(Error::Param(format!("sampling steps must be in 1..={}, got {steps}", schedule.len())));
    }
    let b = slots.batch();
    let dev = slots.slots.device().clone();
    let t_max = schedule.len();
    // τ_1 = T > τ_2 > ... > τ_steps >= 1
    let taus: Vec<usize> = if steps == 1 {
        vec![t_max]
    } else {
        (0..steps)
            .map(|i| t_max - ((i * (t_max - 1)) as f64 / (steps - 1) as f64).round() as usize)
            .collect()
    };
    let mut x = nn::randn(rng, &[b, image_size.0, image_size.1, 3], &dev)?;
    for (i, &tau) in taus.iter().enumerate() {
        let t = vec![tau; b];
        let ab = schedule.alpha_bar(tau)?;
        let ab_prev = match taus.get(i + 1) {
            Some(&p) => schedule.alpha_bar(p)?,
            None => 1.0,
        };
        let beta = 1.0 - ab / ab_prev;
        let eps_hat = denoiser.predict(&x, &t, slots)?;
        let x0 = ((&x - (eps_hat * (1.0 - ab).sqrt())?)? / ab.sqrt())?.clamp(-1f32, 1f32)?;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let mean = ((x0 * c0)? + (&x * ct)?)?;
        x = if i + 1 < taus.len() {
            let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
            (mean + (nn::randn(rng, x.dims(), &dev)? * var.sqrt())?)?
        } else {
            mean
        };
    }
    Ok(x.detach())
}
