//! Joint optimization of the auto-encoding and composition paths, the
//! evaluation harness and checkpoints.
//!
//! Every random draw of a step comes from a ChaCha stream keyed by
//! `(seed, step, purpose)`, so a run resumed from a checkpoint continues
//! exactly as the uninterrupted run would have.

mod ablation;
mod checkpoint;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compose::{self, Lambdas, LossBreakdown, Mix, MixStrategy};
use crate::decoders::{Denoiser, DenoiserConfig, SurrogateConfig, SurrogateDecoder};
use crate::diffusion::{self, NoiseSchedule, PriorReduction, TimestepRange, WeightFn};
use crate::error::{shape_err, Error, Result};
use crate::metrics::probe::{fit_probe, match_slots_to_objects, ProbeConfig, ProbeResult, Property, Target};
use crate::metrics::{extract_masks, resize_nearest, score_sample, summarize, SampleScores, SegMasks};
use crate::nn::{self, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::scenegen::{Dataset, LabeledSample};
use crate::slotcore::{AttentionMap, EncoderConfig, FeatureMap, SlotEncoder, SlotSet};

pub use ablation::{format_table, run_ablation, default_ablation_rows, AblationResult, AblationRow};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

/// Parameter name prefixes of the three networks.
pub const ENCODER: &str = "encoder";
pub const DENOISER: &str = "denoiser";
pub const SURROGATE: &str = "surrogate";

/// Independent random streams used within one step.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Init = 0,
    Diffusion = 1,
    Mix = 2,
    Prior = 3,
    Shuffle = 4,
    Eval = 5,
}

pub fn stream_rng(seed: u64, index: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(8).wrapping_add(stream as u64));
    rng
}

/// Which attention maps enter the mask regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegVariant {
    /// Slots of image `k` attending over the features of image `k`.
    #[default]
    #[serde(alias = "prose")]
    Own,
    /// Slots of image 1 over the features of image 2 and vice versa.
    #[serde(alias = "literal")]
    Cross,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub weight_fn: WeightFn,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_steps: 1000, beta_start: 1e-4, beta_end: 0.02, weight_fn: WeightFn::One }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        diffusion::make_schedule(self.t_steps, self.beta_start, self.beta_end, self.weight_fn)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    pub surrogate: SurrogateConfig,
    pub schedule: ScheduleConfig,
}

/// Slot count, iteration count and implicit differentiation live in
/// `model.encoder`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Images per step; the first half is paired with the second.
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub lambdas: Lambdas,
    pub timesteps: TimestepRange,
    pub mix: MixStrategy,
    pub shared_init: bool,
    pub prior: bool,
    pub reg: bool,
    pub reg_variant: RegVariant,
    /// Render the composite with the one-step denoiser estimate instead of
    /// the surrogate decoder.
    pub tweedie: bool,
    pub prior_reduction: PriorReduction,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 20_000,
            lr: 1e-4,
            lambdas: Lambdas::default(),
            timesteps: TimestepRange::default(),
            mix: MixStrategy::SharedInit,
            shared_init: true,
            prior: true,
            reg: true,
            reg_variant: RegVariant::Own,
            tweedie: false,
            prior_reduction: PriorReduction::Mean,
            seed: 0,
            checkpoint_every: 500,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!("batch size must be even and at least 2, got {}", self.batch_size)));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.mix == MixStrategy::SharedInit && !self.shared_init {
            return Err(Error::Config("shared-init mixing needs shared_init = true".into()));
        }
        self.lambdas.validate()?;
        self.timesteps.validate()?;
        self.model.encoder.validate()?;
        if self.model.encoder.n_slots < 2 && self.composes() && self.mix == MixStrategy::SharedInit {
            return Err(Error::Config("shared-init mixing needs at least two slots".into()));
        }
        Ok(())
    }

    /// Lambdas with disabled terms set to zero.
    pub fn effective_lambdas(&self) -> Lambdas {
        Lambdas {
            prior: if self.prior { self.lambdas.prior } else { 0.0 },
            reg: if self.reg { self.lambdas.reg } else { 0.0 },
            ..self.lambdas
        }
    }

    /// Whether the composition path contributes to the objective at all.
    pub fn composes(&self) -> bool {
        let l = self.effective_lambdas();
        l.prior != 0.0 || l.reg != 0.0
    }
}

/// `E_θ`, `D_φ` and `D_ψ` over one parameter store, plus detached views of
/// both decoders for the composition path.
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: SlotEncoder,
    pub denoiser: Denoiser,
    pub surrogate: SurrogateDecoder,
    pub frozen_denoiser: Denoiser,
    pub frozen_surrogate: SurrogateDecoder,
    pub schedule: NoiseSchedule,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let dev = Device::Cpu;
        let enc = &config.encoder;
        enc.validate()?;
        let schedule = config.schedule.build()?;
        let store = ParamStore::new(seed, &dev);
        let root = store.root();
        let encoder = SlotEncoder::new(&root.pp(ENCODER), enc)?;
        let denoiser = Denoiser::new(&root.pp(DENOISER), &config.denoiser, enc.image_size, enc.slot_dim, schedule.len())?;
        let surrogate = SurrogateDecoder::new(&root.pp(SURROGATE), &config.surrogate, enc.image_size, enc.slot_dim)?;
        let frozen = store.frozen();
        let froot = frozen.root();
        let frozen_denoiser =
            Denoiser::new(&froot.pp(DENOISER), &config.denoiser, enc.image_size, enc.slot_dim, schedule.len())?;
        let frozen_surrogate = SurrogateDecoder::new(&froot.pp(SURROGATE), &config.surrogate, enc.image_size, enc.slot_dim)?;
        Ok(Self { config: config.clone(), store, encoder, denoiser, surrogate, frozen_denoiser, frozen_surrogate, schedule })
    }

    /// Parameters under `prefix`, ordered by name.
    pub fn params(&self, prefix: &str) -> Vec<(String, Var)> {
        let dotted = format!("{prefix}.");
        self.store.vars().into_iter().filter(|(n, _)| n.starts_with(&dotted)).collect()
    }

    pub fn grid(&self) -> (usize, usize) {
        self.config.encoder.grid()
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.config.encoder.image_size
    }
}

/// Everything a training run mutates.
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub opt: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            model: Model::new(&config.model, config.seed)?,
            opt: Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }),
            step: 0,
        })
    }
}

/// The four loss terms of one step before weighting, with the intermediate
/// values the routing checks look at.
pub struct StepGraph {
    pub prior: Tensor,
    pub diff: Tensor,
    pub recon: Tensor,
    pub reg: Tensor,
    pub slots: SlotSet,
    pub composite: Option<Tensor>,
    /// Zero-valued leaf added to the composite when requested; its gradient
    /// is the gradient at the composite.
    pub composite_probe: Option<Var>,
    pub mix: Option<Mix>,
}

fn zero(dev: &Device) -> Result<Tensor> {
    Ok(Tensor::zeros((), DType::F32, dev)?)
}

fn narrow_attn(a: &AttentionMap, start: usize, len: usize) -> Result<AttentionMap> {
    Ok(AttentionMap { weights: a.weights.narrow(0, start, len)?, iteration: a.iteration })
}

/// Forward pass of one step on `batch` (`(2B', H, W, 3)`), drawing from the
/// streams of `(seed, index)`.
pub fn forward_losses(model: &Model, cfg: &TrainConfig, batch: &Tensor, seed: u64, index: u64) -> Result<StepGraph> {
    forward_losses_probed(model, cfg, batch, seed, index, false)
}

/// [`forward_losses`] with an optional gradient probe on the composite.
pub fn forward_losses_probed(
    model: &Model,
    cfg: &TrainConfig,
    batch: &Tensor,
    seed: u64,
    index: u64,
    probe: bool,
) -> Result<StepGraph> {
    let (b, h, w, c) = batch.dims4()?;
    if b < 2 || b % 2 != 0 {
        return shape_err(format!("batch of {b} images cannot be split into pairs"));
    }
    if (h, w, c) != (model.image_size().0, model.image_size().1, 3) {
        return shape_err(format!("images {h}×{w}×{c} do not match model input {:?}", model.image_size()));
    }
    let half = b / 2;
    let dev = batch.device();
    let enc_cfg = &model.config.encoder;

    let mut init_rng = stream_rng(seed, index, Stream::Init);
    let init = if cfg.shared_init {
        let s0 = model.encoder.init_slots(&mut init_rng, half)?;
        SlotSet::cat(&[&s0, &s0])?
    } else {
        model.encoder.init_slots(&mut init_rng, b)?
    };
    let enc = model.encoder.encode_from(batch, &init, enc_cfg.n_iters, enc_cfg.implicit)?;

    let diff = diffusion::diffusion_loss(
        &model.denoiser,
        batch,
        &enc.slots,
        &mut stream_rng(seed, index, Stream::Diffusion),
        &model.schedule,
    )?;
    let recon = compose::recon_loss(&model.surrogate.decode(&enc.slots)?, batch)?;

    if !cfg.composes() {
        return Ok(StepGraph {
            prior: zero(dev)?,
            diff,
            recon,
            reg: zero(dev)?,
            slots: enc.slots,
            composite: None,
            composite_probe: None,
            mix: None,
        });
    }

    let s1 = enc.slots.narrow_batch(0, half)?;
    let s2 = enc.slots.narrow_batch(half, half)?;
    let x1 = batch.narrow(0, 0, half)?;
    let x2 = batch.narrow(0, half, half)?;
    let mix = compose::mix(cfg.mix, &s1, &s2, &mut stream_rng(seed, index, Stream::Mix))?;
    let mut prior_rng = stream_rng(seed, index, Stream::Prior);
    let x_c = if cfg.tweedie {
        let (lo, hi) = cfg.timesteps.steps(model.schedule.len());
        let t: Vec<usize> = (0..half).map(|_| rand::Rng::random_range(&mut prior_rng, lo..=hi)).collect();
        let eps = nn::randn(&mut prior_rng, x1.dims(), dev)?;
        let x_t = diffusion::forward_corrupt(&x1.detach(), &t, &eps, &model.schedule)?;
        let eps_hat = model.frozen_denoiser.denoise(&x_t, &t, &mix.slots)?;
        diffusion::tweedie_one_step(&x_t, &t, &eps_hat, &model.schedule)?
    } else {
        model.frozen_surrogate.decode(&mix.slots)?
    };
    let (x_c, composite_probe) = if probe {
        let p = Var::zeros(x_c.dims(), DType::F32, dev)?;
        ((x_c + p.as_tensor())?, Some(p))
    } else {
        (x_c, None)
    };

    let lambdas = cfg.effective_lambdas();
    let prior = if lambdas.prior != 0.0 {
        diffusion::prior_gradient_loss(
            &model.frozen_denoiser,
            &x_c,
            &mix.slots,
            &mut prior_rng,
            &model.schedule,
            &cfg.timesteps,
            cfg.prior_reduction,
        )?
    } else {
        zero(dev)?
    };
    let reg = if lambdas.reg != 0.0 {
        let (a1, a2) = match cfg.reg_variant {
            RegVariant::Own => (narrow_attn(&enc.attn, 0, half)?, narrow_attn(&enc.attn, half, half)?),
            RegVariant::Cross => {
                let f = &enc.features;
                let f1 = FeatureMap::new(f.features.narrow(0, 0, half)?, f.grid)?;
                let f2 = FeatureMap::new(f.features.narrow(0, half, half)?, f.grid)?;
                (model.encoder.slot_attn.attention(&f2, &s1)?, model.encoder.slot_attn.attention(&f1, &s2)?)
            }
        };
        compose::reg_loss(&a1, &a2, &x1, &x2, &x_c, &mix.specs, model.grid())?
    } else {
        zero(dev)?
    };
    Ok(StepGraph { prior, diff, recon, reg, slots: enc.slots, composite: Some(x_c), composite_probe, mix: Some(mix) })
}

/// One optimizer step on the weighted total; the step counter advances only
/// when every term is finite.
pub fn train_step(state: &mut TrainState, batch: &Tensor) -> Result<LossBreakdown> {
    let g = forward_losses(&state.model, &state.config, batch, state.config.seed, state.step)?;
    let (total, breakdown) = compose::total_loss(&g.prior, &g.diff, &g.recon, &g.reg, &state.config.effective_lambdas())?;
    let grads = total.backward()?;
    state.opt.apply(&state.model.store.vars(), &grads)?;
    state.step += 1;
    Ok(breakdown)
}

/// Stack samples into a `(B, H, W, 3)` tensor.
pub fn batch_tensor(samples: &[&LabeledSample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * h * w * 3);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return shape_err("samples in a batch differ in size");
        }
        data.extend_from_slice(&s.image);
    }
    Ok(Tensor::from_vec(data, (samples.len(), h, w, 3), &Device::Cpu)?)
}

/// Dataset indices for `step`: each epoch is a fresh permutation cut into
/// `⌊n / batch⌋` batches; leftovers are dropped.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    if batch == 0 || n < batch {
        return Err(Error::Dataset(format!("dataset of {n} samples is smaller than the batch size {batch}")));
    }
    let per_epoch = (n / batch) as u64;
    let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream_rng(seed, epoch, Stream::Shuffle));
    Ok(perm[k * batch..(k + 1) * batch].to_vec())
}

/// Train until `state.step == until`, calling `on_step` after every step.
pub fn train(
    state: &mut TrainState,
    data: &Dataset,
    until: u64,
    mut on_step: impl FnMut(&TrainState, &LossBreakdown) -> Result<()>,
) -> Result<()> {
    while state.step < until {
        let idx = batch_indices(data.len(), state.config.batch_size, state.config.seed, state.step)?;
        let samples: Vec<&LabeledSample> = idx.iter().map(|&i| &data.samples[i]).collect();
        let losses = train_step(state, &batch_tensor(&samples)?)?;
        on_step(state, &losses)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub seed: u64,
    /// Also average the loss terms over the evaluation set.
    pub losses: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batch_size: 32, seed: 0, losses: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fg_ari: f64,
    pub miou: f64,
    pub mbo: f64,
    pub n_samples: usize,
    pub n_no_foreground: usize,
    pub losses: Option<LossBreakdown>,
    #[serde(default)]
    pub probes: Vec<ProbeResult>,
}

/// One encoded sample: its slots `(N, D)` row-major and its grid segmentation.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub slots: Vec<f32>,
    pub n_slots: usize,
    pub masks: SegMasks,
}

/// Encode `samples` in batches; batch `k` draws its initial slots from the
/// evaluation stream `(seed, k)`.
pub fn encode_samples(model: &Model, samples: &[&LabeledSample], batch_size: usize, seed: u64) -> Result<Vec<Encoded>> {
    let enc_cfg = &model.config.encoder;
    let mut out = Vec::with_capacity(samples.len());
    for (k, chunk) in samples.chunks(batch_size.max(1)).enumerate() {
        let x = batch_tensor(chunk)?;
        let init = model.encoder.init_slots(&mut stream_rng(seed, k as u64, Stream::Eval), chunk.len())?;
        let enc = model.encoder.encode_from(&x, &init, enc_cfg.n_iters, enc_cfg.implicit)?;
        let masks = extract_masks(&enc.attn.weights, model.grid())?;
        let slots = enc.slots.slots.to_vec3::<f32>()?;
        for (s, m) in slots.into_iter().zip(masks) {
            out.push(Encoded { slots: s.concat(), n_slots: enc_cfg.n_slots, masks: m });
        }
    }
    Ok(out)
}

/// Score grid segmentations against full-resolution ground truth.
pub fn score_masks(masks: &[SegMasks], samples: &[&LabeledSample]) -> Vec<SampleScores> {
    masks.iter().zip(samples).map(|(m, s)| score_sample(m, &s.gt_masks, (s.height, s.width))).collect()
}

/// Segmentation metrics of `model` on `data`, and optionally the loss terms
/// under `train_cfg` averaged over full evaluation batches.
pub fn evaluate(model: &Model, train_cfg: &TrainConfig, data: &Dataset, cfg: &EvalConfig) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let samples: Vec<&LabeledSample> = data.samples.iter().collect();
    let encoded = encode_samples(model, &samples, cfg.batch_size, cfg.seed)?;
    let masks: Vec<SegMasks> = encoded.into_iter().map(|e| e.masks).collect();
    let summary = summarize(&score_masks(&masks, &samples));
    let losses = if cfg.losses { eval_losses(model, train_cfg, &samples, cfg)? } else { None };
    Ok(MetricsReport {
        fg_ari: summary.fg_ari,
        miou: summary.miou,
        mbo: summary.mbo,
        n_samples: summary.n_samples,
        n_no_foreground: summary.n_no_foreground,
        losses,
        probes: Vec::new(),
    })
}

fn eval_losses(model: &Model, cfg: &TrainConfig, samples: &[&LabeledSample], eval: &EvalConfig) -> Result<Option<LossBreakdown>> {
    let bs = (eval.batch_size.min(samples.len()) / 2) * 2;
    if bs < 2 {
        return Ok(None);
    }
    let lambdas = cfg.effective_lambdas();
    let mut acc = [0.0f64; 4];
    let mut n = 0usize;
    for (k, chunk) in samples.chunks_exact(bs).enumerate() {
        let g = forward_losses(model, cfg, &batch_tensor(chunk)?, eval.seed, k as u64)?;
        for (a, t) in acc.iter_mut().zip([&g.prior, &g.diff, &g.recon, &g.reg]) {
            *a += nn::scalar(t)?;
        }
        n += 1;
    }
    let m = |v: f64| v / n as f64;
    Ok(Some(LossBreakdown::from_values(m(acc[0]), m(acc[1]), m(acc[2]), m(acc[3]), lambdas)?))
}

/// Probe one object property from frozen slots matched to visible objects.
pub fn property_probe(
    model: &Model,
    data: &Dataset,
    property: Property,
    probe: &ProbeConfig,
    eval: &EvalConfig,
) -> Result<ProbeResult> {
    let samples: Vec<&LabeledSample> = data.samples.iter().collect();
    let encoded = encode_samples(model, &samples, eval.batch_size, eval.seed)?;
    let d = model.config.encoder.slot_dim;
    let mut examples: Vec<(Vec<f32>, Target)> = Vec::new();
    for (e, s) in encoded.iter().zip(&samples) {
        let visible: Vec<usize> = (0..s.properties.len()).filter(|&k| s.is_visible(k)).collect();
        if visible.is_empty() {
            continue;
        }
        let gt = resize_nearest(&s.gt_masks, (s.height, s.width), e.masks.grid);
        for (obj, slot) in match_slots_to_objects(&e.masks, &gt, e.n_slots, &visible) {
            examples.push((e.slots[slot * d..(slot + 1) * d].to_vec(), property.target(&s.properties[obj])));
        }
    }
    fit_probe(&examples, property, probe, eval.seed)
}

#[cfg(test)]
mod tests;
