use candle_core::{Tensor, D};

use crate::error::{shape_err, Result};
use crate::nn::{self, Linear, Mlp, Scope};
use crate::slotcore::{position_grid, SlotSet};

pub struct MixtureOutput {
    pub image: Tensor,
    /// `(B, N, H, W)`; sums to one over `N` at every pixel.
    pub alphas: Tensor,
    pub rgb: Tensor,
}

/// Alpha-composite per-slot renderings.
///
/// `rgb` is `(B, N, H, W, 3)`, `alpha_logits` is `(B, N, H, W)`; the logits
/// are softmax-normalized over the slot axis.
pub fn blend(rgb: &Tensor, alpha_logits: &Tensor) -> Result<MixtureOutput> {
    let (b, n, h, w, _) = rgb.dims5()?;
    if alpha_logits.dims() != [b, n, h, w] {
        return shape_err(format!("alpha logits {:?} vs rgb {:?}", alpha_logits.dims(), rgb.dims()));
    }
    let alphas = nn::softmax_last(&alpha_logits.permute((0, 2, 3, 1))?.contiguous()?)?
        .permute((0, 3, 1, 2))?
        .contiguous()?;
    let image = rgb.broadcast_mul(&alphas.unsqueeze(D::Minus1)?)?.sum(1)?;
    Ok(MixtureOutput { image, alphas, rgb: rgb.clone() })
}

/// Spatial-broadcast decoder: every slot is painted onto the grid with a
/// positional code and rendered to RGB plus an alpha logit independently.
pub struct MixtureDecoder {
    slot_in: Linear,
    pos: Linear,
    mlp: Mlp,
    patch: usize,
    grid: (usize, usize),
}

impl MixtureDecoder {
    pub fn new(s: &Scope, image_size: (usize, usize), patch: usize, slot_dim: usize, hidden: usize) -> Result<Self> {
        let grid = (image_size.0 / patch, image_size.1 / patch);
        Ok(Self {
            slot_in: Linear::new(&s.pp("slot_in"), slot_dim, hidden)?,
            pos: Linear::new(&s.pp("pos"), 4, hidden)?,
            mlp: Mlp::new(&s.pp("mlp"), hidden, hidden, patch * patch * 4)?,
            patch,
            grid,
        })
    }

    pub fn decode(&self, slots: &SlotSet) -> Result<MixtureOutput> {
        let (b, n, _) = slots.slots.dims3()?;
        let (gh, gw) = self.grid;
        let s = self.slot_in.forward(&slots.slots)?.reshape((b * n, 1, 1, ()))?;
        let pos = self.pos.forward(&position_grid(self.grid, slots.slots.device())?)?;
        let h = s.broadcast_add(&pos)?.relu()?;
        let out = nn::depth_to_space(&self.mlp.forward(&h)?.reshape((b * n, gh, gw, ()))?, self.patch)?;
        let (hh, ww) = (gh * self.patch, gw * self.patch);
        let rgb = out.narrow(D::Minus1, 0, 3)?.reshape((b, n, hh, ww, 3))?;
        let logits = out.narrow(D::Minus1, 3, 1)?.reshape((b, n, hh, ww))?;
        blend(&rgb, &logits)
    }
}
