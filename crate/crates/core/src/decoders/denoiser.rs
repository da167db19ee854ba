use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{self, Conv3x3, LayerNorm, Linear, Mlp, MultiHeadAttention, Scope};
use crate::slotcore::SlotSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Channels at the top resolution; the lower level uses twice this.
    pub width: usize,
    pub heads: usize,
    pub res_blocks: usize,
    /// Space-to-depth factor applied before the UNet.
    pub patch: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { width: 32, heads: 4, res_blocks: 2, patch: 2 }
    }
}

struct ResBlock {
    norm: LayerNorm,
    conv1: Conv3x3,
    temb: Linear,
    conv2: Conv3x3,
    skip: Option<Linear>,
}

impl ResBlock {
    fn new(s: &Scope, c_in: usize, c_out: usize, t_dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&s.pp("norm"), c_in)?,
            conv1: Conv3x3::new(&s.pp("conv1"), c_in, c_out)?,
            temb: Linear::new(&s.pp("temb"), t_dim, c_out)?,
            conv2: Conv3x3::new(&s.pp("conv2"), c_out, c_out)?,
            skip: if c_in != c_out { Some(Linear::no_bias(&s.pp("skip"), c_in, c_out)?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let (b, _, _, _) = x.dims4()?;
        let h = self.conv1.forward(&self.norm.forward(x)?.relu()?)?;
        let t = self.temb.forward(temb)?.reshape((b, 1, 1, ()))?;
        let h = self.conv2.forward(&h.broadcast_add(&t)?.relu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

struct CrossAttn {
    norm: LayerNorm,
    attn: MultiHeadAttention,
}

impl CrossAttn {
    fn new(s: &Scope, c: usize, slot_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self { norm: LayerNorm::new(&s.pp("norm"), c)?, attn: MultiHeadAttention::new(&s.pp("attn"), c, slot_dim, heads)? })
    }

    fn forward(&self, x: &Tensor, slots: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let flat = x.reshape((b, h * w, c))?;
        let out = self.attn.forward(&self.norm.forward(&flat)?, slots)?;
        Ok((x + out.reshape((b, h, w, c))?)?)
    }
}

struct Stage {
    blocks: Vec<ResBlock>,
    cross: CrossAttn,
}

impl Stage {
    fn new(s: &Scope, c_in: usize, c_out: usize, n: usize, t_dim: usize, slot_dim: usize, heads: usize) -> Result<Self> {
        let blocks = (0..n)
            .map(|i| ResBlock::new(&s.pp(format!("res{i}")), if i == 0 { c_in } else { c_out }, c_out, t_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, cross: CrossAttn::new(&s.pp("cross"), c_out, slot_dim, heads)? })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, slots: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(&h, temb)?;
        }
        self.cross.forward(&h, slots)
    }
}

/// Two-resolution UNet predicting the noise in `x_t`, conditioned on the
/// timestep (sinusoidal embedding) and on the slots (cross-attention after
/// each stage). The output layer starts at zero.
pub struct Denoiser {
    stem: Linear,
    time_mlp: Mlp,
    down: Stage,
    mid: Stage,
    up: Stage,
    norm_out: LayerNorm,
    out: Linear,
    width: usize,
    patch: usize,
    slot_dim: usize,
    image_size: (usize, usize),
    n_steps: usize,
}

impl Denoiser {
    pub fn new(s: &Scope, cfg: &DenoiserConfig, image_size: (usize, usize), slot_dim: usize, n_steps: usize) -> Result<Self> {
        let (h, w) = image_size;
        if cfg.patch == 0 || h % (2 * cfg.patch) != 0 || w % (2 * cfg.patch) != 0 {
            return Err(Error::Config(format!("image {h}×{w} incompatible with denoiser patch {} and one downsampling", cfg.patch)));
        }
        if cfg.res_blocks == 0 {
            return Err(Error::Config("denoiser needs at least one residual block per stage".into()));
        }
        let c = cfg.width;
        let pc = cfg.patch * cfg.patch * 3;
        let t_dim = 2 * c;
        let n = cfg.res_blocks;
        Ok(Self {
            stem: Linear::new(&s.pp("stem"), pc, c)?,
            time_mlp: Mlp::new(&s.pp("time"), c, t_dim, t_dim)?,
            down: Stage::new(&s.pp("down"), c, c, n, t_dim, slot_dim, cfg.heads)?,
            mid: Stage::new(&s.pp("mid"), c, 2 * c, n, t_dim, slot_dim, cfg.heads)?,
            up: Stage::new(&s.pp("up"), 3 * c, c, n, t_dim, slot_dim, cfg.heads)?,
            norm_out: LayerNorm::new(&s.pp("norm_out"), c)?,
            out: Linear::zeros(&s.pp("out"), c, pc)?,
            width: c,
            patch: cfg.patch,
            slot_dim,
            image_size,
            n_steps,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Predict `ε̂` for `x_t` at 1-based timesteps `t` (one per batch row).
    pub fn denoise(&self, x_t: &Tensor, t: &[usize], slots: &SlotSet) -> Result<Tensor> {
        let (b, h, w, c) = x_t.dims4()?;
        if (h, w) != self.image_size || c != 3 {
            return shape_err(format!("denoiser expects (B, {}, {}, 3), got {:?}", self.image_size.0, self.image_size.1, x_t.dims()));
        }
        if t.len() != b || slots.batch() != b {
            return shape_err(format!("batch {b} with {} timesteps and {} slot rows", t.len(), slots.batch()));
        }
        if slots.dim() != self.slot_dim {
            return shape_err(format!("denoiser expects slot width {}, got {}", self.slot_dim, slots.dim()));
        }
        if let Some(&bad) = t.iter().find(|&&s| s == 0 || s > self.n_steps) {
            return Err(Error::Range(format!("timestep {bad} outside 1..={}", self.n_steps)));
        }
        let temb = self.time_mlp.forward(&nn::timestep_embedding(t, self.width, x_t.device())?)?;
        let s = &slots.slots;
        let x = self.stem.forward(&nn::space_to_depth(x_t, self.patch)?)?;
        let skip = self.down.forward(&x, &temb, s)?;
        let low = self.mid.forward(&nn::avg_pool2(&skip)?, &temb, s)?;
        let up = Tensor::cat(&[&nn::upsample2(&low)?, &skip], D::Minus1)?;
        let h = self.up.forward(&up, &temb, s)?;
        let eps = self.out.forward(&self.norm_out.forward(&h)?.relu()?)?;
        nn::depth_to_space(&eps, self.patch)
    }
}
