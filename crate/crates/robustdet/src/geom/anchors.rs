//! Anchor grids, anchor-to-ground-truth matching, and box delta coding.

use serde::{Deserialize, Serialize};

use super::{iou, BBox, GroundTruth};
use crate::{Error, Result};

/// Anchor layout shared by the grid builder and the detection heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Stride in pixels of each feature level.
    pub level_strides: Vec<usize>,
    /// Anchor side length (pixels) of the unit-ratio anchor.
    pub scales: Vec<f64>,
    /// Height/width ratios.
    pub aspect_ratios: Vec<f64>,
}

impl AnchorConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            level_strides: vec![16],
            scales: vec![28.0, 52.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

/// Fixed prior boxes laid out row-major per level, then per cell in
/// (scale, ratio) order. Anchors may extend past the image border; they are
/// only clipped after decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub anchors: Vec<BBox>,
    pub config: AnchorConfig,
    pub image_size: (usize, usize),
}

/// Builds the deterministic anchor grid for an `(height, width)` image.
/// Every level stride must divide both image dimensions.
pub fn build_anchors(image_size: (usize, usize), config: &AnchorConfig) -> Result<AnchorGrid> {
    let (h, w) = image_size;
    if config.level_strides.is_empty() || config.scales.is_empty() || config.aspect_ratios.is_empty()
    {
        return Err(Error::Config(
            "anchor config needs at least one stride, scale, and ratio".into(),
        ));
    }
    let mut anchors = Vec::new();
    for &stride in &config.level_strides {
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} not divisible by anchor stride {stride}"
            )));
        }
        let (gh, gw) = (h / stride, w / stride);
        for gy in 0..gh {
            for gx in 0..gw {
                let cx = (gx as f64 + 0.5) * stride as f64;
                let cy = (gy as f64 + 0.5) * stride as f64;
                for &scale in &config.scales {
                    for &ratio in &config.aspect_ratios {
                        // Constant area scale^2 across ratios, ratio = h/w.
                        let aw = scale / ratio.sqrt();
                        let ah = scale * ratio.sqrt();
                        anchors.push(BBox {
                            x_min: cx - 0.5 * aw,
                            y_min: cy - 0.5 * ah,
                            x_max: cx + 0.5 * aw,
                            y_max: cy + 0.5 * ah,
                        });
                    }
                }
            }
        }
    }
    Ok(AnchorGrid {
        anchors,
        config: config.clone(),
        image_size,
    })
}

/// Per-anchor training assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    /// Matched to the ground truth with this index.
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub assignments: Vec<Assignment>,
}

impl MatchResult {
    pub fn num_positive(&self) -> usize {
        self.assignments
            .iter()
            .filter(|a| matches!(a, Assignment::Positive(_)))
            .count()
    }
}

/// Assigns every anchor to POSITIVE / NEGATIVE / IGNORE.
///
/// IoU >= `pos_thr` makes an anchor positive for its best-overlapping ground
/// truth, IoU < `neg_thr` makes it negative, anything between is ignored.
/// Additionally each ground truth claims its best-overlapping anchor even
/// below `pos_thr`, so no object goes untrained on coarse grids. When two
/// ground truths claim the same anchor the higher IoU wins (lower index on
/// ties).
pub fn match_anchors(
    grid: &AnchorGrid,
    gts: &[GroundTruth],
    pos_thr: f64,
    neg_thr: f64,
) -> Result<MatchResult> {
    if pos_thr < neg_thr {
        return Err(Error::Config(format!(
            "pos_thr {pos_thr} must be >= neg_thr {neg_thr}"
        )));
    }
    let n = grid.anchors.len();
    if gts.is_empty() {
        return Ok(MatchResult {
            assignments: vec![Assignment::Negative; n],
        });
    }

    let mut assignments = Vec::with_capacity(n);
    // Best anchor per ground truth, tracked while scanning.
    let mut best_for_gt: Vec<(f64, usize)> = vec![(-1.0, 0); gts.len()];
    for (ai, anchor) in grid.anchors.iter().enumerate() {
        let mut best_iou = -1.0;
        let mut best_gt = 0;
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou(anchor, &gt.bbox);
            if v > best_iou {
                best_iou = v;
                best_gt = gi;
            }
            if v > best_for_gt[gi].0 {
                best_for_gt[gi] = (v, ai);
            }
        }
        assignments.push(if best_iou >= pos_thr {
            Assignment::Positive(best_gt)
        } else if best_iou < neg_thr {
            Assignment::Negative
        } else {
            Assignment::Ignore
        });
    }

    // Force-assign each gt's best anchor; higher IoU wins collisions.
    let mut forced: Vec<Option<(f64, usize)>> = vec![None; n];
    for (gi, &(v, ai)) in best_for_gt.iter().enumerate() {
        match forced[ai] {
            Some((prev, _)) if prev >= v => {}
            _ => forced[ai] = Some((v, gi)),
        }
    }
    for (ai, slot) in forced.iter().enumerate() {
        if let Some((_, gi)) = slot {
            assignments[ai] = Assignment::Positive(*gi);
        }
    }

    Ok(MatchResult { assignments })
}

/// Encodes `target` relative to `anchor` as (dx, dy, dw, dh): center offsets
/// in units of the anchor size plus log size ratios.
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    [
        (tcx - acx) / anchor.width(),
        (tcy - acy) / anchor.height(),
        (target.width() / anchor.width()).ln(),
        (target.height() / anchor.height()).ln(),
    ]
}

/// Inverse of [`encode_deltas`]. The result is not clipped; clip to image
/// bounds at detection time with [`BBox::clip`].
pub fn decode_deltas(anchor: &BBox, deltas: &[f64; 4]) -> BBox {
    let (acx, acy) = anchor.center();
    let cx = acx + deltas[0] * anchor.width();
    let cy = acy + deltas[1] * anchor.height();
    let w = anchor.width() * deltas[2].exp();
    let h = anchor.height() * deltas[3].exp();
    BBox {
        x_min: cx - 0.5 * w,
        y_min: cy - 0.5 * h,
        x_max: cx + 0.5 * w,
        y_max: cy + 0.5 * h,
    }
}
