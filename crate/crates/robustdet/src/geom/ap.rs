//! Average precision with all-points precision-recall integration.
//!
//! Detections are matched greedily in descending score order to the
//! best-overlapping unmatched ground truth of the same image; a match counts
//! as a true positive when its IoU reaches the threshold. AP integrates the
//! interpolated precision envelope over recall, so only the score ordering
//! matters, never the score values.

use super::{iou, Detection, GroundTruth};
use crate::{Error, Result};

/// IoU thresholds averaged by [`map_range`]: 0.50, 0.55, ..., 0.95.
pub const MAP_RANGE_THRESHOLDS: [f64; 10] = [
    0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95,
];

/// Class-agnostic AP over a corpus of images. `dets` and `gts` are parallel
/// per-image lists. Returns `None` when there are no ground truths at all.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    iou_thr: f64,
) -> Option<f64> {
    assert_eq!(dets.len(), gts.len(), "per-image lists must align");
    let n_gt: usize = gts.iter().map(|g| g.len()).sum();
    if n_gt == 0 {
        return None;
    }

    // Global score ordering; ties break on (image, position) so the result
    // is deterministic and invariant under strictly monotone score rescaling.
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (img, d) in dets.iter().enumerate() {
        for di in 0..d.len() {
            order.push((img, di));
        }
    }
    order.sort_by(|&(ia, da), &(ib, db)| {
        dets[ib][db]
            .score
            .partial_cmp(&dets[ia][da].score)
            .expect("scores are finite")
            .then(ia.cmp(&ib))
            .then(da.cmp(&db))
    });

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(order.len());
    for &(img, di) in &order {
        let det = &dets[img][di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts[img].iter().enumerate() {
            if matched[img][gi] {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= iou_thr && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[img][gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }

    // Precision envelope integrated over recall.
    let mut cum_tp = 0usize;
    let mut points = Vec::with_capacity(tp.len());
    for (i, &hit) in tp.iter().enumerate() {
        cum_tp += hit as usize;
        points.push((
            cum_tp as f64 / n_gt as f64,
            cum_tp as f64 / (i + 1) as f64,
        ));
    }
    let mut envelope = points.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(recall, precision) in &envelope {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Mean AP over the classes that appear in the ground truths. Errors when no
/// class has any ground truth, since the mean is undefined there.
pub fn mean_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    iou_thr: f64,
    num_classes: usize,
) -> Result<f64> {
    let mut aps = Vec::new();
    for class in 0..num_classes {
        let class_dets: Vec<Vec<Detection>> = dets
            .iter()
            .map(|d| d.iter().filter(|x| x.class_id == class).copied().collect())
            .collect();
        let class_gts: Vec<Vec<GroundTruth>> = gts
            .iter()
            .map(|g| g.iter().filter(|x| x.class_id == class).copied().collect())
            .collect();
        if let Some(ap) = average_precision(&class_dets, &class_gts, iou_thr) {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        return Err(Error::Eval(
            "mAP undefined: no class has any ground truth".into(),
        ));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Mean of [`mean_ap`] over the ten [`MAP_RANGE_THRESHOLDS`].
pub fn map_range(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    num_classes: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for &thr in &MAP_RANGE_THRESHOLDS {
        total += mean_ap(dets, gts, thr, num_classes)?;
    }
    Ok(total / MAP_RANGE_THRESHOLDS.len() as f64)
}
