//! Segmentation metrics on slot attention masks.
//!
//! Predicted labels are 0-based slot indices on the attention grid. Ground
//! truth uses 0 for background and `k + 1` for object `k`, and is resized to
//! the grid by nearest neighbour before comparison.

mod hungarian;
pub mod probe;

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

pub use hungarian::hungarian;

/// Per-location slot assignment on a `grid`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMasks {
    pub labels: Vec<u16>,
    pub grid: (usize, usize),
}

/// Argmax over slots for every location of every batch row; ties go to the
/// lowest slot index.
pub fn extract_masks(weights: &Tensor, grid: (usize, usize)) -> Result<Vec<SegMasks>> {
    let (_, m, _) = weights.dims3()?;
    if m != grid.0 * grid.1 {
        return shape_err(format!("{m} locations for grid {grid:?}"));
    }
    Ok(weights
        .to_vec3::<f32>()?
        .into_iter()
        .map(|rows| SegMasks { labels: rows.iter().map(|r| argmax_first(r) as u16).collect(), grid })
        .collect())
}

fn argmax_first(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Nearest-neighbour resize of a label image, sampling at cell centres.
pub fn resize_nearest(labels: &[u16], from: (usize, usize), to: (usize, usize)) -> Vec<u16> {
    let (h, w) = from;
    let (th, tw) = to;
    let mut out = Vec::with_capacity(th * tw);
    for r in 0..th {
        let sr = ((2 * r + 1) * h) / (2 * th);
        for c in 0..tw {
            let sc = ((2 * c + 1) * w) / (2 * tw);
            out.push(labels[sr * w + sc]);
        }
    }
    out
}

fn comb2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings of the same points.
///
/// When the expected and maximal index coincide (both labelings trivial,
/// or fewer than two points) the score is 1.
pub fn ari(a: &[u16], b: &[u16]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let mut table: BTreeMap<(u16, u16), u64> = BTreeMap::new();
    let mut rows: BTreeMap<u16, u64> = BTreeMap::new();
    let mut cols: BTreeMap<u16, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| comb2(n)).sum();
    let sum_a: f64 = rows.values().map(|&n| comb2(n)).sum();
    let sum_b: f64 = cols.values().map(|&n| comb2(n)).sum();
    let total = comb2(a.len() as u64);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FgAri {
    pub value: f64,
    /// Set when the ground truth had no foreground; `value` is then 0.
    pub no_foreground: bool,
}

/// ARI restricted to locations whose ground-truth label is nonzero.
pub fn fg_ari(pred: &[u16], gt: &[u16]) -> FgAri {
    assert_eq!(pred.len(), gt.len(), "prediction and ground truth differ in size");
    let (p, g): (Vec<u16>, Vec<u16>) = pred.iter().zip(gt).filter(|(_, &g)| g > 0).map(|(&p, &g)| (p, g)).unzip();
    if g.is_empty() {
        return FgAri { value: 0.0, no_foreground: true };
    }
    FgAri { value: ari(&p, &g), no_foreground: false }
}

/// IoU between every ground-truth segment (rows) and every predicted label
/// (columns). Segment ids are returned in ascending order.
pub fn iou_matrix(pred: &[u16], gt: &[u16], include_background: bool) -> (Vec<u16>, Vec<u16>, Vec<Vec<f64>>) {
    let mut inter: BTreeMap<(u16, u16), u64> = BTreeMap::new();
    let mut g_area: BTreeMap<u16, u64> = BTreeMap::new();
    let mut p_area: BTreeMap<u16, u64> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        *p_area.entry(p).or_default() += 1;
        if include_background || g > 0 {
            *g_area.entry(g).or_default() += 1;
            *inter.entry((g, p)).or_default() += 1;
        }
    }
    let gs: Vec<u16> = g_area.keys().copied().collect();
    let ps: Vec<u16> = p_area.keys().copied().collect();
    let m = gs
        .iter()
        .map(|g| {
            ps.iter()
                .map(|p| {
                    let i = *inter.get(&(*g, *p)).unwrap_or(&0) as f64;
                    let u = (g_area[g] + p_area[p]) as f64 - i;
                    if u > 0.0 { i / u } else { 0.0 }
                })
                .collect()
        })
        .collect();
    (gs, ps, m)
}

/// Mean IoU over ground-truth segments under the one-to-one matching that
/// maximizes total IoU; unmatched segments score 0.
pub fn miou_with(pred: &[u16], gt: &[u16], include_background: bool) -> f64 {
    matched_mean_iou(&iou_matrix(pred, gt, include_background).2)
}

/// Mean over rows of the IoU matrix under the best one-to-one matching.
pub fn matched_mean_iou(iou: &[Vec<f64>]) -> f64 {
    if iou.is_empty() {
        return 0.0;
    }
    let cost: Vec<Vec<f64>> = iou.iter().map(|r| r.iter().map(|v| 1.0 - v).collect()).collect();
    let total: f64 = hungarian(&cost).iter().map(|&(r, c)| iou[r][c]).sum();
    total / iou.len() as f64
}

/// Mean over ground-truth segments of the best IoU with any predicted mask.
pub fn mbo_with(pred: &[u16], gt: &[u16], include_background: bool) -> f64 {
    let (gs, _, m) = iou_matrix(pred, gt, include_background);
    if gs.is_empty() {
        return 0.0;
    }
    m.iter().map(|r| r.iter().cloned().fold(0.0, f64::max)).sum::<f64>() / gs.len() as f64
}

/// Background counts as a segment.
pub fn miou(pred: &[u16], gt: &[u16]) -> f64 {
    miou_with(pred, gt, true)
}

/// Background counts as a segment.
pub fn mbo(pred: &[u16], gt: &[u16]) -> f64 {
    mbo_with(pred, gt, true)
}

/// Scores for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleScores {
    pub fg_ari: f64,
    pub miou: f64,
    pub mbo: f64,
    pub no_foreground: bool,
}

/// Compare a predicted grid segmentation with a full-resolution gt mask.
pub fn score_sample(pred: &SegMasks, gt: &[u16], gt_size: (usize, usize)) -> SampleScores {
    let g = resize_nearest(gt, gt_size, pred.grid);
    let fg = fg_ari(&pred.labels, &g);
    SampleScores { fg_ari: fg.value, miou: miou(&pred.labels, &g), mbo: mbo(&pred.labels, &g), no_foreground: fg.no_foreground }
}

/// Averages over a set of samples.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentationSummary {
    pub fg_ari: f64,
    pub miou: f64,
    pub mbo: f64,
    pub n_samples: usize,
    /// Samples whose ground truth had no foreground; they are left out of the FG-ARI mean.
    pub n_no_foreground: usize,
}

pub fn summarize(scores: &[SampleScores]) -> SegmentationSummary {
    let n = scores.len();
    let with_fg: Vec<&SampleScores> = scores.iter().filter(|s| !s.no_foreground).collect();
    let mean = |xs: &mut dyn Iterator<Item = f64>, k: usize| if k == 0 { 0.0 } else { xs.sum::<f64>() / k as f64 };
    SegmentationSummary {
        fg_ari: mean(&mut with_fg.iter().map(|s| s.fg_ari), with_fg.len()),
        miou: mean(&mut scores.iter().map(|s| s.miou), n),
        mbo: mean(&mut scores.iter().map(|s| s.mbo), n),
        n_samples: n,
        n_no_foreground: n - with_fg.len(),
    }
}
