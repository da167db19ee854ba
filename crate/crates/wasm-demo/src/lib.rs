//! Browser demo for the sprite world.
//!
//! Three operations are exported: render a scene from a seed, discover its
//! objects with slot attention over pixel features, and score any
//! segmentation against the scene's ground truth.
//!
//! Discovery uses the library's attention primitives with identity
//! projections instead of a trained encoder. With keys `[f, 1]` and queries
//! `[s, −|s|²/2]` the attention logits equal `−|f − s|²/2` up to a per-pixel
//! constant, so the iteration is soft k-means with slots competing for
//! pixels.

use candle_core::{Device, Tensor};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slotcomp::metrics::{extract_masks, fg_ari, mbo, miou, SegMasks};
use slotcomp::render::slot_color;
use slotcomp::scenegen::{generate_indexed, GenConfig, LabeledSample};
use slotcomp::slotcore::{attention_weights, weighted_mean};
use wasm_bindgen::prelude::*;

/// Largest canvas and slot count the page offers.
pub const MAX_SIZE: usize = 128;
pub const MAX_SLOTS: usize = 10;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Slot-colored RGBA for a label image.
fn labels_rgba(labels: &[u16]) -> Vec<u8> {
    labels.iter().flat_map(|&l| {
        let [r, g, b] = slot_color(l as usize);
        [r, g, b, 255]
    }).collect()
}

#[wasm_bindgen]
pub struct Scene {
    sample: LabeledSample,
}

#[wasm_bindgen]
impl Scene {
    /// Scene `index` of the stream defined by `seed`, on a `size × size` canvas.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, index: u32, size: usize, min_objects: usize, max_objects: usize) -> Result<Scene, JsError> {
        if !(8..=MAX_SIZE).contains(&size) {
            return Err(js_err(format!("size must be in 8..={MAX_SIZE}")));
        }
        let cfg = GenConfig { height: size, width: size, min_objects, max_objects, ..GenConfig::default() };
        let sample = generate_indexed(&cfg, seed as u64, index as u64).map_err(js_err)?;
        Ok(Scene { sample })
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.sample.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.sample.height
    }

    #[wasm_bindgen(getter)]
    pub fn visible_objects(&self) -> usize {
        self.sample.num_visible()
    }

    /// The rendered image as RGBA bytes for `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        self.sample.image.chunks_exact(3).flat_map(|p| [to_byte(p[0]), to_byte(p[1]), to_byte(p[2]), 255]).collect()
    }

    /// Ground-truth segmentation; background takes the first palette color.
    pub fn truth_rgba(&self) -> Vec<u8> {
        labels_rgba(&self.sample.gt_masks)
    }

    /// Ground-truth label per pixel; 0 is background.
    pub fn truth_labels(&self) -> Vec<u16> {
        self.sample.gt_masks.clone()
    }

    /// Soft k-means slot attention over `(r, g, b, w·x, w·y)` pixel features.
    pub fn discover(&self, n_slots: usize, iters: usize, position_weight: f32, sharpness: f32, seed: u32) -> Result<Discovery, JsError> {
        let labels = discover_labels(&self.sample, n_slots, iters, position_weight, sharpness, seed as u64).map_err(js_err)?;
        Ok(Discovery::scored(&self.sample, labels))
    }

    /// Score a segmentation given as one label per pixel, e.g. painted by hand.
    pub fn score(&self, labels: Vec<u16>) -> Result<Discovery, JsError> {
        if labels.len() != self.sample.gt_masks.len() {
            return Err(js_err(format!("expected {} labels, got {}", self.sample.gt_masks.len(), labels.len())));
        }
        Ok(Discovery::scored(&self.sample, labels))
    }
}

/// A segmentation of a scene with its scores against the ground truth.
#[wasm_bindgen]
pub struct Discovery {
    labels: Vec<u16>,
    fg_ari: f64,
    miou: f64,
    mbo: f64,
}

impl Discovery {
    fn scored(sample: &LabeledSample, labels: Vec<u16>) -> Self {
        let gt = &sample.gt_masks;
        Self { fg_ari: fg_ari(&labels, gt).value, miou: miou(&labels, gt), mbo: mbo(&labels, gt), labels }
    }
}

#[wasm_bindgen]
impl Discovery {
    #[wasm_bindgen(getter)]
    pub fn fg_ari(&self) -> f64 {
        self.fg_ari
    }

    #[wasm_bindgen(getter)]
    pub fn miou(&self) -> f64 {
        self.miou
    }

    #[wasm_bindgen(getter)]
    pub fn mbo(&self) -> f64 {
        self.mbo
    }

    pub fn labels(&self) -> Vec<u16> {
        self.labels.clone()
    }

    pub fn rgba(&self) -> Vec<u8> {
        labels_rgba(&self.labels)
    }
}

/// Per-pixel features `(1, H·W, 5)`: color in `[-1, 1]` and position in `[-w, w]`.
fn pixel_features(sample: &LabeledSample, position_weight: f32) -> Vec<f32> {
    let (h, w) = (sample.height, sample.width);
    let coord = |i: usize, n: usize| position_weight * (2.0 * (i as f32 + 0.5) / n as f32 - 1.0);
    (0..h * w)
        .flat_map(|p| {
            let c = &sample.image[3 * p..3 * p + 3];
            [c[0], c[1], c[2], coord(p % w, w), coord(p / w, h)]
        })
        .collect()
}

pub fn discover_labels(
    sample: &LabeledSample,
    n_slots: usize,
    iters: usize,
    position_weight: f32,
    sharpness: f32,
    seed: u64,
) -> slotcomp::Result<Vec<u16>> {
    let m = sample.height * sample.width;
    if !(1..=MAX_SLOTS.min(m)).contains(&n_slots) || iters == 0 || !(sharpness > 0.0) {
        return Err(slotcomp::Error::Usage(format!("need 1..={MAX_SLOTS} slots, iters >= 1 and sharpness > 0")));
    }
    let dev = Device::Cpu;
    let d = 5;
    let feats = Tensor::from_vec(pixel_features(sample, position_weight), (1, m, d), &dev)?;
    // attention divides the logits by √(d + 1); fold that and the sharpness into the keys
    let keys = (Tensor::cat(&[&feats, &Tensor::ones((1, m, 1), feats.dtype(), &dev)?], 2)?
        * (sharpness as f64 * ((d + 1) as f64).sqrt()))?;
    // start from distinct random pixels
    let picks: Vec<u32> = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), m, n_slots).into_iter().map(|i| i as u32).collect();
    let mut slots = feats.squeeze(0)?.index_select(&Tensor::from_vec(picks, n_slots, &dev)?, 0)?.unsqueeze(0)?;
    let mut attn = Tensor::zeros((1, m, n_slots), feats.dtype(), &dev)?;
    for _ in 0..iters {
        let bias = (slots.sqr()?.sum_keepdim(2)? * -0.5)?;
        attn = attention_weights(&keys, &Tensor::cat(&[&slots, &bias], 2)?)?;
        slots = weighted_mean(&attn, &feats)?;
    }
    let SegMasks { labels, .. } = extract_masks(&attn, (sample.height, sample.width))?.remove(0);
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(seed: u64) -> LabeledSample {
        let cfg = GenConfig { height: 24, width: 24, ..GenConfig::default() };
        generate_indexed(&cfg, seed, 0).unwrap()
    }

    #[test]
    fn discovery_is_deterministic_and_well_formed() {
        let s = scene(1);
        let a = discover_labels(&s, 5, 8, 0.5, 4.0, 3).unwrap();
        assert_eq!(a, discover_labels(&s, 5, 8, 0.5, 4.0, 3).unwrap());
        assert_eq!(a.len(), 24 * 24);
        assert!(a.iter().all(|&l| l < 5));
        assert!(discover_labels(&s, 0, 8, 0.5, 4.0, 3).is_err());
        assert!(discover_labels(&s, 5, 0, 0.5, 4.0, 3).is_err());
    }

    #[test]
    fn logits_are_negative_half_squared_distance() {
        // two slots; each pixel goes to the nearest one
        let s = scene(2);
        let labels = discover_labels(&s, 2, 1, 0.0, 50.0, 0).unwrap();
        let f = pixel_features(&s, 0.0);
        let dist = |p: usize, q: &[f32]| (0..5).map(|k| (f[5 * p + k] - q[k]).powi(2)).sum::<f32>();
        let picks: Vec<usize> = index::sample(&mut ChaCha8Rng::seed_from_u64(0), 24 * 24, 2).into_iter().collect();
        let centers: Vec<&[f32]> = picks.iter().map(|&p| &f[5 * p..5 * p + 5]).collect();
        for (p, &l) in labels.iter().enumerate() {
            let (d0, d1) = (dist(p, centers[0]), dist(p, centers[1]));
            if (d0 - d1).abs() > 1e-3 {
                assert_eq!(l, (d1 < d0) as u16, "pixel {p}");
            }
        }
    }

    #[test]
    fn perfect_segmentation_scores_one() {
        let s = scene(3);
        let d = Discovery::scored(&s, s.gt_masks.clone());
        assert_eq!((d.fg_ari, d.miou, d.mbo), (1.0, 1.0, 1.0));
        assert_eq!(d.rgba().len(), 4 * s.gt_masks.len());
    }

    #[test]
    fn discovery_beats_a_single_segment() {
        let mut better = 0;
        for seed in 0..10 {
            let s = scene(seed);
            let found = Discovery::scored(&s, discover_labels(&s, 6, 10, 0.3, 8.0, seed).unwrap());
            let flat = Discovery::scored(&s, vec![0; s.gt_masks.len()]);
            better += (found.miou > flat.miou) as usize;
        }
        assert!(better >= 8, "{better}/10");
    }
}
