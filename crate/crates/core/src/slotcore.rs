//! Slot attention encoder.
//!
//! A convolutional backbone turns an image into a flattened feature grid
//! `z ∈ R^{M×D'}`; slots drawn from a learned Gaussian are refined by
//! attention that is normalized over the slot axis, so slots compete for
//! input locations. The final iteration's attention map doubles as the
//! model's segmentation.

use candle_core::{Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{self, Conv3x3, GruCell, Init, LayerNorm, Linear, Mlp, Scope};

/// Denominator stabilizer for the weighted mean over input locations.
pub const NORMALIZE_EPS: f64 = 1e-8;
/// Lower clamp applied to the slot initialization scale.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneArch {
    Cnn,
    Unet,
}

impl std::str::FromStr for BackboneArch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Self::Cnn),
            "unet" => Ok(Self::Unet),
            other => Err(Error::Config(format!("unsupported backbone `{other}` (expected cnn | unet)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub arch: BackboneArch,
    pub image_size: (usize, usize),
    /// Pixels per feature cell along each axis (1 or 2).
    pub patch: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub slot_dim: usize,
    pub n_slots: usize,
    pub n_iters: usize,
    pub implicit: bool,
    pub residual_mlp: bool,
    pub layer_norm: bool,
    pub pos_embed: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            arch: BackboneArch::Unet,
            image_size: (32, 32),
            patch: 2,
            width: 32,
            feature_dim: 64,
            slot_dim: 64,
            n_slots: 5,
            n_iters: 7,
            implicit: true,
            residual_mlp: true,
            layer_norm: true,
            pos_embed: true,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch, self.image_size.1 / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Config(format!("image {h}×{w} not divisible by patch {}", self.patch)));
        }
        let (gh, gw) = self.grid();
        if self.arch == BackboneArch::Unet && (gh % 2 != 0 || gw % 2 != 0) {
            return Err(Error::Config(format!("unet backbone needs an even grid, got {gh}×{gw}")));
        }
        if self.n_slots == 0 {
            return Err(Error::Config("at least one slot is required".into()));
        }
        if self.n_iters == 0 {
            return Err(Error::Config("at least one refinement iteration is required".into()));
        }
        if gh * gw < self.n_slots {
            eprintln!("warning: {} feature locations for {} slots", gh * gw, self.n_slots);
        }
        Ok(())
    }
}

/// Flattened feature grid `(B, M, D')` with `M = H'·W'`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub features: Tensor,
    pub grid: (usize, usize),
}

impl FeatureMap {
    pub fn new(features: Tensor, grid: (usize, usize)) -> Result<Self> {
        let (_, m, _) = features.dims3()?;
        if m != grid.0 * grid.1 {
            return shape_err(format!("{m} locations do not match grid {grid:?}"));
        }
        Ok(Self { features, grid })
    }
}

/// Identifies the draw a row of initial slots came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InitTag {
    pub draw: u64,
    pub row: u32,
}

/// `(B, N, D)` slots plus, when known, the initialization each row descends from.
#[derive(Debug, Clone)]
pub struct SlotSet {
    pub slots: Tensor,
    pub init_id: Option<Vec<InitTag>>,
}

impl SlotSet {
    pub fn new(slots: Tensor) -> Result<Self> {
        let (_, n, _) = slots.dims3()?;
        if n == 0 {
            return shape_err("slot set needs N >= 1");
        }
        Ok(Self { slots, init_id: None })
    }

    pub fn batch(&self) -> usize {
        self.slots.dims()[0]
    }

    pub fn n_slots(&self) -> usize {
        self.slots.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.slots.dims()[2]
    }

    pub fn detach(&self) -> Self {
        Self { slots: self.slots.detach(), init_id: self.init_id.clone() }
    }

    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            slots: self.slots.narrow(0, start, len)?,
            init_id: self.init_id.as_ref().map(|ids| ids[start..start + len].to_vec()),
        })
    }

    /// Stack along the batch axis.
    pub fn cat(sets: &[&SlotSet]) -> Result<Self> {
        let tensors: Vec<&Tensor> = sets.iter().map(|s| &s.slots).collect();
        let init_id = sets
            .iter()
            .map(|s| s.init_id.clone())
            .collect::<Option<Vec<_>>>()
            .map(|v| v.concat());
        Ok(Self { slots: Tensor::cat(&tensors, 0)?, init_id })
    }

    /// Keep slot indices `keep` (in order) for every batch row.
    pub fn select(&self, keep: &[usize]) -> Result<Self> {
        if keep.iter().any(|&k| k >= self.n_slots()) {
            return Err(Error::Usage(format!("slot index out of range 0..{}", self.n_slots())));
        }
        let idx = Tensor::from_vec(keep.iter().map(|&k| k as u32).collect::<Vec<_>>(), keep.len(), self.slots.device())?;
        Ok(Self { slots: self.slots.index_select(&idx, 1)?, init_id: None })
    }

    /// Reorder slots by `perm` (output slot `i` is input slot `perm[i]`).
    pub fn permute_slots(&self, perm: &[usize]) -> Result<Self> {
        let mut out = self.select(perm)?;
        out.init_id = self.init_id.clone();
        Ok(out)
    }
}

/// Learnable mean and scale of the initial slot distribution.
#[derive(Debug, Clone)]
pub struct SlotInitParams {
    pub mu: Tensor,
    log_sigma: Tensor,
}

impl SlotInitParams {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        let bound = (6.0 / (2.0 * dim as f32)).sqrt();
        Ok(Self {
            mu: s.get(&[dim], "mu", Init::Uniform(bound))?,
            log_sigma: s.get(&[dim], "log_sigma", Init::Uniform(bound))?,
        })
    }

    /// Fixed parameters; every `sigma` entry must be strictly positive.
    pub fn from_values(mu: &[f32], sigma: &[f32], device: &Device) -> Result<Self> {
        if mu.len() != sigma.len() {
            return shape_err("mu and sigma lengths differ");
        }
        if let Some(bad) = sigma.iter().find(|&&s| !(s > 0.0)) {
            return Err(Error::Param(format!("sigma must be positive, got {bad}")));
        }
        let log_sigma: Vec<f32> = sigma.iter().map(|s| s.ln()).collect();
        Ok(Self {
            mu: Tensor::from_slice(mu, mu.len(), device)?,
            log_sigma: Tensor::from_vec(log_sigma, sigma.len(), device)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.dims()[0]
    }

    pub fn sigma(&self) -> Result<Tensor> {
        Ok(self.log_sigma.exp()?.clamp(SIGMA_FLOOR, f64::INFINITY)?)
    }
}

/// Draw `S⁽⁰⁾ ~ N(μ, diag σ)` for `b` images with `n` slots each.
///
/// The draw consumes one `u64` from `rng`; the recorded [`InitTag`]s let two
/// encodings prove they started from the same draw.
pub fn init_slots(params: &SlotInitParams, rng: &mut impl Rng, b: usize, n: usize) -> Result<SlotSet> {
    if n == 0 {
        return shape_err("init_slots needs N >= 1");
    }
    let draw: u64 = rng.random();
    let d = params.dim();
    let noise = nn::randn(&mut ChaCha8Rng::seed_from_u64(draw), &[b, n, d], params.mu.device())?;
    let slots = noise.broadcast_mul(&params.sigma()?)?.broadcast_add(&params.mu)?;
    Ok(SlotSet {
        slots,
        init_id: Some((0..b as u32).map(|row| InitTag { draw, row }).collect()),
    })
}

/// Per-location distribution over slots, `(B, M, N)`.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub weights: Tensor,
    pub iteration: usize,
}

/// `softmax_N(k · qᵀ / √D)` for keys `(B, M, D)` and queries `(B, N, D)`.
pub fn attention_weights(k: &Tensor, q: &Tensor) -> Result<Tensor> {
    let (bk, _, dk) = k.dims3()?;
    let (bq, _, dq) = q.dims3()?;
    if dk != dq {
        return shape_err(format!("key width {dk} differs from query width {dq}"));
    }
    if bk != bq {
        return shape_err(format!("batch {bk} vs {bq}"));
    }
    let logits = (k.matmul(&q.t()?.contiguous()?)? / (dk as f64).sqrt())?;
    nn::softmax_last(&logits)
}

/// `Normalize(Aᵀ·v)`: each slot's weights are renormalized over `M` before
/// the weighted sum, giving a weighted mean of the value rows.
pub fn weighted_mean(attn: &Tensor, values: &Tensor) -> Result<Tensor> {
    let mass = attn.sum_keepdim(1)?;
    let w = attn.broadcast_div(&(mass + NORMALIZE_EPS)?)?;
    Ok(w.t()?.contiguous()?.matmul(values)?)
}

pub struct Backbone {
    arch: BackboneArch,
    patch: usize,
    stem: Linear,
    convs: Vec<Conv3x3>,
    pos: Option<Linear>,
    norm: Option<LayerNorm>,
    mlp: Mlp,
    grid: (usize, usize),
}

impl Backbone {
    pub fn new(s: &Scope, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let stem = Linear::new(&s.pp("stem"), cfg.patch * cfg.patch * 3, w)?;
        let convs = match cfg.arch {
            BackboneArch::Cnn => (0..3)
                .map(|i| Conv3x3::new(&s.pp(format!("conv{i}")), w, w))
                .collect::<Result<Vec<_>>>()?,
            BackboneArch::Unet => vec![
                Conv3x3::new(&s.pp("enc0"), w, w)?,
                Conv3x3::new(&s.pp("down0"), w, 2 * w)?,
                Conv3x3::new(&s.pp("down1"), 2 * w, 2 * w)?,
                Conv3x3::new(&s.pp("up0"), 3 * w, w)?,
                Conv3x3::new(&s.pp("up1"), w, w)?,
            ],
        };
        let pos = if cfg.pos_embed { Some(Linear::new(&s.pp("pos"), 4, w)?) } else { None };
        let norm = if cfg.layer_norm { Some(LayerNorm::new(&s.pp("norm"), w)?) } else { None };
        Ok(Self {
            arch: cfg.arch,
            patch: cfg.patch,
            stem,
            convs,
            pos,
            norm,
            mlp: Mlp::new(&s.pp("mlp"), w, w, cfg.feature_dim)?,
            grid: cfg.grid(),
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<FeatureMap> {
        let (b, h, w, c) = image.dims4()?;
        if c != 3 || h / self.patch != self.grid.0 || w / self.patch != self.grid.1 {
            return shape_err(format!("backbone expects (B, {}, {}, 3), got {:?}", self.grid.0 * self.patch, self.grid.1 * self.patch, image.dims()));
        }
        let mut x = self.stem.forward(&nn::space_to_depth(image, self.patch)?)?.relu()?;
        match self.arch {
            BackboneArch::Cnn => {
                for conv in &self.convs {
                    x = conv.forward(&x)?.relu()?;
                }
            }
            BackboneArch::Unet => {
                let skip = self.convs[0].forward(&x)?.relu()?;
                let mut d = self.convs[1].forward(&nn::avg_pool2(&skip)?)?.relu()?;
                d = self.convs[2].forward(&d)?.relu()?;
                let up = Tensor::cat(&[&nn::upsample2(&d)?, &skip], D::Minus1)?;
                x = self.convs[3].forward(&up)?.relu()?;
                x = self.convs[4].forward(&x)?.relu()?;
            }
        }
        if let Some(pos) = &self.pos {
            let grid = position_grid(self.grid, image.device())?;
            x = x.broadcast_add(&pos.forward(&grid)?)?;
        }
        let (gh, gw) = self.grid;
        let mut flat = x.reshape((b, gh * gw, ()))?;
        if let Some(norm) = &self.norm {
            flat = norm.forward(&flat)?;
        }
        FeatureMap::new(self.mlp.forward(&flat)?, self.grid)
    }
}

/// `(H', W', 4)` grid of `(y, x, 1 - y, 1 - x)` coordinates.
pub fn position_grid(grid: (usize, usize), device: &Device) -> Result<Tensor> {
    let (gh, gw) = grid;
    let norm = |i: usize, n: usize| if n > 1 { i as f32 / (n - 1) as f32 } else { 0.5 };
    let mut data = Vec::with_capacity(gh * gw * 4);
    for r in 0..gh {
        for c in 0..gw {
            let (y, x) = (norm(r, gh), norm(c, gw));
            data.extend_from_slice(&[y, x, 1.0 - y, 1.0 - x]);
        }
    }
    Ok(Tensor::from_vec(data, (gh, gw, 4), device)?)
}

/// The iterative attention module: projections, GRU and residual MLP.
pub struct SlotAttention {
    norm_inputs: Option<LayerNorm>,
    norm_slots: Option<LayerNorm>,
    norm_mlp: Option<LayerNorm>,
    k: Linear,
    q: Linear,
    v: Linear,
    gru: GruCell,
    mlp: Option<Mlp>,
}

/// Keys and values of a feature map, shared across refinement iterations.
pub struct ProjectedInputs {
    pub k: Tensor,
    pub v: Tensor,
}

impl SlotAttention {
    pub fn new(s: &Scope, cfg: &EncoderConfig) -> Result<Self> {
        let (dp, d) = (cfg.feature_dim, cfg.slot_dim);
        let ln = |name: &str, dim| -> Result<Option<LayerNorm>> {
            if cfg.layer_norm { Ok(Some(LayerNorm::new(&s.pp(name), dim)?)) } else { Ok(None) }
        };
        Ok(Self {
            norm_inputs: ln("norm_inputs", dp)?,
            norm_slots: ln("norm_slots", d)?,
            norm_mlp: if cfg.residual_mlp { ln("norm_mlp", d)? } else { None },
            k: Linear::no_bias(&s.pp("k"), dp, d)?,
            q: Linear::no_bias(&s.pp("q"), d, d)?,
            v: Linear::no_bias(&s.pp("v"), dp, d)?,
            gru: GruCell::new(&s.pp("gru"), d, d)?,
            mlp: if cfg.residual_mlp { Some(Mlp::new(&s.pp("mlp"), d, 2 * d, d)?) } else { None },
        })
    }

    pub fn project_inputs(&self, features: &FeatureMap) -> Result<ProjectedInputs> {
        let z = match &self.norm_inputs {
            Some(n) => n.forward(&features.features)?,
            None => features.features.clone(),
        };
        Ok(ProjectedInputs { k: self.k.forward(&z)?, v: self.v.forward(&z)? })
    }

    fn queries(&self, slots: &Tensor) -> Result<Tensor> {
        match &self.norm_slots {
            Some(n) => self.q.forward(&n.forward(slots)?),
            None => self.q.forward(slots),
        }
    }

    pub fn attention(&self, features: &FeatureMap, slots: &SlotSet) -> Result<AttentionMap> {
        let inputs = self.project_inputs(features)?;
        Ok(AttentionMap { weights: attention_weights(&inputs.k, &self.queries(&slots.slots)?)?, iteration: 0 })
    }

    /// Single refinement from projected inputs; returns the new slots and the
    /// attention used to compute them.
    pub fn refine_projected(&self, inputs: &ProjectedInputs, slots: &Tensor) -> Result<(Tensor, Tensor)> {
        let (bs, _, _) = slots.dims3()?;
        if inputs.k.dims()[0] != bs {
            return shape_err(format!("slots batch {bs} vs features batch {}", inputs.k.dims()[0]));
        }
        let attn = attention_weights(&inputs.k, &self.queries(slots)?)?;
        let updates = weighted_mean(&attn, &inputs.v)?;
        let mut next = self.gru.forward(&updates, slots)?;
        if let Some(mlp) = &self.mlp {
            let h = match &self.norm_mlp {
                Some(n) => n.forward(&next)?,
                None => next.clone(),
            };
            next = (&next + mlp.forward(&h)?)?;
        }
        Ok((next, attn))
    }

    pub fn refine_step(&self, slots: &SlotSet, features: &FeatureMap) -> Result<(SlotSet, AttentionMap)> {
        let inputs = self.project_inputs(features)?;
        let (next, attn) = self.refine_projected(&inputs, &slots.slots)?;
        Ok((
            SlotSet { slots: next, init_id: slots.init_id.clone() },
            AttentionMap { weights: attn, iteration: 1 },
        ))
    }
}

pub struct EncodeOutput {
    pub slots: SlotSet,
    /// Attention of the last refinement iteration.
    pub attn: AttentionMap,
    pub features: FeatureMap,
}

/// `E_θ`: backbone, slot initialization and slot attention.
pub struct SlotEncoder {
    pub backbone: Backbone,
    pub slot_attn: SlotAttention,
    pub init: SlotInitParams,
    pub config: EncoderConfig,
}

impl SlotEncoder {
    pub fn new(s: &Scope, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            backbone: Backbone::new(&s.pp("backbone"), cfg)?,
            slot_attn: SlotAttention::new(&s.pp("slot_attn"), cfg)?,
            init: SlotInitParams::new(&s.pp("init"), cfg.slot_dim)?,
            config: cfg.clone(),
        })
    }

    pub fn init_slots(&self, rng: &mut impl Rng, b: usize) -> Result<SlotSet> {
        init_slots(&self.init, rng, b, self.config.n_slots)
    }

    /// Encode with the configured iteration count; draws a fresh `S⁽⁰⁾`
    /// unless `shared_init` is given.
    pub fn encode(&self, image: &Tensor, rng: &mut impl Rng, shared_init: Option<&SlotSet>) -> Result<EncodeOutput> {
        let init = match shared_init {
            Some(s) => s.clone(),
            None => self.init_slots(rng, image.dims()[0])?,
        };
        self.encode_from(image, &init, self.config.n_iters, self.config.implicit)
    }

    /// Refine `init` for `n_iters` steps. With `implicit`, only the last step
    /// is differentiated; the starting point of that step carries gradient
    /// to `S⁽⁰⁾` (and hence μ, σ) through an identity skip.
    pub fn encode_from(&self, image: &Tensor, init: &SlotSet, n_iters: usize, implicit: bool) -> Result<EncodeOutput> {
        if n_iters == 0 {
            return Err(Error::Config("n_iters must be at least 1".into()));
        }
        let features = self.backbone.forward(image)?;
        let b = image.dims()[0];
        if init.batch() != b || init.n_slots() != self.config.n_slots || init.dim() != self.config.slot_dim {
            return shape_err(format!(
                "initial slots {:?} do not match batch {b}, N={}, D={}",
                init.slots.dims(),
                self.config.n_slots,
                self.config.slot_dim
            ));
        }
        let (slots, attn) = self.refine_loop(&features, &init.slots, n_iters, implicit)?;
        Ok(EncodeOutput {
            slots: SlotSet { slots, init_id: init.init_id.clone() },
            attn: AttentionMap { weights: attn, iteration: n_iters },
            features,
        })
    }

    pub fn refine_loop(&self, features: &FeatureMap, init: &Tensor, n_iters: usize, implicit: bool) -> Result<(Tensor, Tensor)> {
        let inputs = self.slot_attn.project_inputs(features)?;
        let mut slots = init.clone();
        for _ in 0..n_iters - 1 {
            slots = self.slot_attn.refine_projected(&inputs, &slots)?.0;
        }
        if implicit && n_iters > 1 {
            slots = (slots.detach() + (init - init.detach())?)?;
        }
        self.slot_attn.refine_projected(&inputs, &slots)
    }
}
