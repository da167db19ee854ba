use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{self, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, Scope};
use crate::slotcore::SlotSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Pixels per token along each axis.
    pub patch: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { layers: 2, heads: 4, hidden: 64, patch: 4 }
    }
}

/// Learnable per-position query tokens, one per decoder grid cell.
#[derive(Debug, Clone)]
pub struct MaskTokens {
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

impl MaskTokens {
    pub fn new(s: &Scope, grid: (usize, usize), dim: usize) -> Result<Self> {
        Ok(Self { tokens: s.get(&[grid.0 * grid.1, dim], "tokens", Init::Normal(0.02))?, grid })
    }
}

struct Block {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_mlp: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn forward(&self, x: &Tensor, slots: &Tensor) -> Result<Tensor> {
        let h = self.norm_self.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h)?)?;
        let x = (&x + self.cross_attn.forward(&self.norm_cross.forward(&x)?, slots)?)?;
        Ok((&x + self.mlp.forward(&self.norm_mlp.forward(&x)?)?)?)
    }
}

/// One-shot bidirectional transformer: mask tokens attend to each other and
/// to the slots, then a linear head expands each token into a pixel patch.
pub struct SurrogateDecoder {
    pub mask_tokens: MaskTokens,
    blocks: Vec<Block>,
    norm_out: LayerNorm,
    head: Linear,
    patch: usize,
    slot_dim: usize,
}

impl SurrogateDecoder {
    pub fn new(s: &Scope, cfg: &SurrogateConfig, image_size: (usize, usize), slot_dim: usize) -> Result<Self> {
        let (h, w) = image_size;
        if cfg.patch == 0 || h % cfg.patch != 0 || w % cfg.patch != 0 {
            return Err(Error::Config(format!("image {h}×{w} not divisible by surrogate patch {}", cfg.patch)));
        }
        let c = cfg.hidden;
        let blocks = (0..cfg.layers)
            .map(|i| {
                let b = s.pp(format!("block{i}"));
                Ok(Block {
                    norm_self: LayerNorm::new(&b.pp("norm_self"), c)?,
                    self_attn: MultiHeadAttention::new(&b.pp("self_attn"), c, c, cfg.heads)?,
                    norm_cross: LayerNorm::new(&b.pp("norm_cross"), c)?,
                    cross_attn: MultiHeadAttention::new(&b.pp("cross_attn"), c, slot_dim, cfg.heads)?,
                    norm_mlp: LayerNorm::new(&b.pp("norm_mlp"), c)?,
                    mlp: Mlp::new(&b.pp("mlp"), c, 2 * c, c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mask_tokens: MaskTokens::new(&s.pp("mask"), (h / cfg.patch, w / cfg.patch), c)?,
            blocks,
            norm_out: LayerNorm::new(&s.pp("norm_out"), c)?,
            head: Linear::new(&s.pp("head"), c, cfg.patch * cfg.patch * 3)?,
            patch: cfg.patch,
            slot_dim,
        })
    }

    /// `(B, N, D)` slots → `(B, H, W, 3)` image.
    pub fn decode(&self, slots: &SlotSet) -> Result<Tensor> {
        let (b, _, d) = slots.slots.dims3()?;
        if d != self.slot_dim {
            return shape_err(format!("surrogate expects slot width {}, got {d}", self.slot_dim));
        }
        let (gh, gw) = self.mask_tokens.grid;
        let tokens = &self.mask_tokens.tokens;
        let mut x = tokens.unsqueeze(0)?.broadcast_as((b, tokens.dims()[0], tokens.dims()[1]))?.contiguous()?;
        for block in &self.blocks {
            x = block.forward(&x, &slots.slots)?;
        }
        let patches = self.head.forward(&self.norm_out.forward(&x)?)?.reshape((b, gh, gw, ()))?;
        nn::depth_to_space(&patches, self.patch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::test_util::{max_rel, slots};
    use crate::nn::ParamStore;
    use candle_core::Device;

    fn decoder(store: &ParamStore) -> SurrogateDecoder {
        SurrogateDecoder::new(&store.root().pp("dec"), &SurrogateConfig::default(), (32, 32), 16).unwrap()
    }

    #[test]
    fn output_matches_image_shape() {
        let store = ParamStore::new(0, &Device::Cpu);
        let dec = decoder(&store);
        let out = dec.decode(&slots(1, 2, 5, 16)).unwrap();
        assert_eq!(out.dims(), &[2, 32, 32, 3]);
        assert_eq!(dec.mask_tokens.tokens.dims(), &[64, 64]);
        assert!(matches!(dec.decode(&slots(1, 2, 5, 8)), Err(Error::Shape(_))));
    }

    #[test]
    fn output_depends_on_slots() {
        let store = ParamStore::new(0, &Device::Cpu);
        let dec = decoder(&store);
        let s = slots(2, 1, 5, 16);
        let leaf = candle_core::Var::from_tensor(&s.slots).unwrap();
        let out = dec.decode(&SlotSet::new(leaf.as_tensor().clone()).unwrap()).unwrap();
        let g = out.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let gs = g.get(leaf.as_tensor()).unwrap();
        assert!(nn::scalar(&gs.abs().unwrap().sum_all().unwrap()).unwrap() > 0.0);
    }

    #[test]
    fn slot_order_does_not_matter() {
        let store = ParamStore::new(0, &Device::Cpu);
        let dec = decoder(&store);
        let s = slots(3, 2, 5, 16);
        let a = dec.decode(&s).unwrap();
        for perm in [[4usize, 3, 2, 1, 0], [1, 0, 3, 4, 2]] {
            let b = dec.decode(&s.permute_slots(&perm).unwrap()).unwrap();
            assert!(max_rel(&b, &a) < 1e-5);
        }
    }

    #[test]
    fn frozen_view_reads_live_weights_without_gradient() {
        let store = ParamStore::new(0, &Device::Cpu);
        let live = decoder(&store);
        let frozen_store = store.frozen();
        let frozen = SurrogateDecoder::new(&frozen_store.root().pp("dec"), &SurrogateConfig::default(), (32, 32), 16).unwrap();
        let s = slots(4, 1, 5, 16);
        assert_eq!(
            live.decode(&s).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            frozen.decode(&s).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let head = store.var("dec.head.bias").unwrap();
        head.set(&(head.as_tensor() + 1.0).unwrap()).unwrap();
        let diff = (live.decode(&s).unwrap() - frozen.decode(&s).unwrap()).unwrap();
        assert_eq!(nn::scalar(&diff.abs().unwrap().max_keepdim(0).unwrap().sum_all().unwrap()).unwrap(), 0.0);
        let g = frozen.decode(&s).unwrap().sum_all().unwrap().backward().unwrap();
        for (_, v) in store.vars() {
            assert!(g.get(v.as_tensor()).is_none());
        }
    }
}
