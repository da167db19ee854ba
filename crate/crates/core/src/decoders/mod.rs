//! Slot decoders.
//!
//! [`SurrogateDecoder`] renders a composite in a single transformer pass and
//! is what the composition path differentiates through. [`Denoiser`] is the
//! slot-conditioned noise predictor behind the diffusion prior.
//! [`MixtureDecoder`] is the per-slot alpha-compositing baseline.

mod denoiser;
mod mixture;
mod surrogate;

pub use denoiser::{Denoiser, DenoiserConfig};
pub use mixture::{blend, MixtureDecoder, MixtureOutput};
pub use surrogate::{MaskTokens, SurrogateConfig, SurrogateDecoder};

#[cfg(test)]
pub(crate) mod test_util {
    use candle_core::{Device, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::nn;
    use crate::slotcore::SlotSet;

    pub fn slots(seed: u64, b: usize, n: usize, d: usize) -> SlotSet {
        SlotSet::new(nn::randn(&mut ChaCha8Rng::seed_from_u64(seed), &[b, n, d], &Device::Cpu).unwrap()).unwrap()
    }

    /// `max |a - b|` relative to `max |b|`.
    pub fn max_rel(a: &Tensor, b: &Tensor) -> f32 {
        let a = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = b.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        diff / b.iter().fold(0f32, |m, y| m.max(y.abs())).max(1e-12)
    }
}
