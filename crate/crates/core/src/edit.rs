//! Slot-level edits on trained models: encode two images from a shared
//! initial draw, assemble a composite from chosen slots and render it.

use std::str::FromStr;

use candle_core::Tensor;

use crate::diffusion;
use crate::error::{Error, Result};
use crate::metrics::probe::match_slots_to_objects;
use crate::metrics::{extract_masks, resize_nearest, SegMasks};
use crate::scenegen::LabeledSample;
use crate::slotcore::SlotSet;
use crate::trainer::{batch_tensor, stream_rng, Model, Stream};

/// Mean absolute channel difference above which a pixel counts as changed.
pub const CHANGE_THRESHOLD: f32 = 0.1;

/// Slots taken from image A and from image B, in composite order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotPick {
    pub from_a: Vec<usize>,
    pub from_b: Vec<usize>,
}

impl SlotPick {
    pub fn all_of_a(n: usize) -> Self {
        Self { from_a: (0..n).collect(), from_b: Vec::new() }
    }

    /// All of A except slot `k`.
    pub fn remove(n: usize, k: usize) -> Self {
        Self { from_a: (0..n).filter(|&i| i != k).collect(), from_b: Vec::new() }
    }

    /// Replace `*` with every slot index and check bounds against `n`.
    pub fn resolve(&self, n: usize) -> Result<Self> {
        let check = |v: &[usize]| -> Result<Vec<usize>> {
            let out: Vec<usize> = if v == [usize::MAX] { (0..n).collect() } else { v.to_vec() };
            if let Some(bad) = out.iter().find(|&&i| i >= n) {
                return Err(Error::Usage(format!("slot index {bad} out of range 0..{n}")));
            }
            Ok(out)
        };
        let r = Self { from_a: check(&self.from_a)?, from_b: check(&self.from_b)? };
        if r.from_a.is_empty() && r.from_b.is_empty() {
            return Err(Error::Usage("composite must keep at least one slot".into()));
        }
        Ok(r)
    }
}

/// `a:0,1,3;b:2`; either part may be omitted, `*` selects every slot.
impl FromStr for SlotPick {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut pick = SlotPick { from_a: Vec::new(), from_b: Vec::new() };
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (side, list) = part
                .split_once(':')
                .ok_or_else(|| Error::Usage(format!("expected `a:...` or `b:...`, got `{part}`")))?;
            let idx: Vec<usize> = if list.trim() == "*" {
                vec![usize::MAX]
            } else {
                list.split(',')
                    .map(str::trim)
                    .filter(|x| !x.is_empty())
                    .map(|x| x.parse::<usize>().map_err(|_| Error::Usage(format!("bad slot index `{x}`"))))
                    .collect::<Result<_>>()?
            };
            match side.trim() {
                "a" => pick.from_a = idx,
                "b" => pick.from_b = idx,
                other => return Err(Error::Usage(format!("unknown image `{other}` (expected a or b)"))),
            }
        }
        Ok(pick)
    }
}

/// Two images encoded from one initial draw.
pub struct EncodedPair {
    pub a: SlotSet,
    pub b: SlotSet,
    pub masks_a: SegMasks,
    pub masks_b: SegMasks,
}

pub fn encode_pair(model: &Model, a: &LabeledSample, b: &LabeledSample, seed: u64) -> Result<EncodedPair> {
    let cfg = &model.config.encoder;
    let s0 = model.encoder.init_slots(&mut stream_rng(seed, 0, Stream::Eval), 1)?;
    let init = SlotSet::cat(&[&s0, &s0])?;
    let enc = model.encoder.encode_from(&batch_tensor(&[a, b])?, &init, cfg.n_iters, cfg.implicit)?;
    let mut masks = extract_masks(&enc.attn.weights, model.grid())?;
    let masks_b = masks.pop().expect("two rows");
    let masks_a = masks.pop().expect("two rows");
    Ok(EncodedPair {
        a: enc.slots.narrow_batch(0, 1)?.detach(),
        b: enc.slots.narrow_batch(1, 1)?.detach(),
        masks_a,
        masks_b,
    })
}

pub fn compose_slots(a: &SlotSet, b: &SlotSet, pick: &SlotPick) -> Result<SlotSet> {
    let pick = pick.resolve(a.n_slots())?;
    let mut parts = Vec::new();
    if !pick.from_a.is_empty() {
        parts.push(a.select(&pick.from_a)?.slots);
    }
    if !pick.from_b.is_empty() {
        parts.push(b.select(&pick.from_b)?.slots);
    }
    SlotSet::new(Tensor::cat(&parts, 1)?)
}

/// `(1, H, W, 3)` → row-major `H·W·3` values.
pub fn image_values(x: &Tensor) -> Result<Vec<f32>> {
    Ok(x.flatten_all()?.to_vec1::<f32>()?)
}

pub fn render_surrogate(model: &Model, slots: &SlotSet) -> Result<Vec<f32>> {
    image_values(&model.surrogate.decode(slots)?)
}

pub fn render_diffusion(model: &Model, slots: &SlotSet, steps: usize, seed: u64) -> Result<Vec<f32>> {
    let x = diffusion::sample(
        &model.denoiser,
        slots,
        model.image_size(),
        &model.schedule,
        steps,
        &mut stream_rng(seed, 1, Stream::Eval),
    )?;
    image_values(&x)
}

/// Pixels whose mean absolute channel difference exceeds `threshold`.
pub fn change_mask(before: &[f32], after: &[f32], threshold: f32) -> Vec<bool> {
    before
        .chunks_exact(3)
        .zip(after.chunks_exact(3))
        .map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f32>() / 3.0 > threshold)
        .collect()
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Outcome of deleting the slot bound to one object.
#[derive(Debug, Clone, PartialEq)]
pub struct RemovalEdit {
    pub object: usize,
    pub slot: usize,
    pub iou: f64,
    pub changed_pixels: usize,
    pub object_pixels: usize,
}

/// Remove the slot matched to `object` and compare the surrogate rendering's
/// change mask with the object's visible ground-truth mask.
pub fn removal_edit(model: &Model, sample: &LabeledSample, object: usize, seed: u64, threshold: f32) -> Result<RemovalEdit> {
    if !sample.is_visible(object) {
        return Err(Error::Usage(format!("object {object} is not visible")));
    }
    let pair = encode_pair(model, sample, sample, seed)?;
    let n = pair.a.n_slots();
    let gt = resize_nearest(&sample.gt_masks, (sample.height, sample.width), pair.masks_a.grid);
    let slot = match_slots_to_objects(&pair.masks_a, &gt, n, &[object])
        .first()
        .map(|&(_, s)| s)
        .ok_or_else(|| Error::Contract("no slot could be matched".into()))?;
    let before = render_surrogate(model, &pair.a)?;
    let after = render_surrogate(model, &compose_slots(&pair.a, &pair.b, &SlotPick::remove(n, slot))?)?;
    let changed = change_mask(&before, &after, threshold);
    let obj: Vec<bool> = sample.gt_masks.iter().map(|&g| g as usize == object + 1).collect();
    Ok(RemovalEdit {
        object,
        slot,
        iou: mask_iou(&changed, &obj),
        changed_pixels: changed.iter().filter(|&&c| c).count(),
        object_pixels: obj.iter().filter(|&&c| c).count(),
    })
}

/// The visible object with the largest ground-truth area.
pub fn largest_visible_object(sample: &LabeledSample) -> Option<usize> {
    (0..sample.properties.len())
        .filter(|&k| sample.is_visible(k))
        .max_by_key(|&k| (sample.gt_masks.iter().filter(|&&g| g as usize == k + 1).count(), std::cmp::Reverse(k)))
}
