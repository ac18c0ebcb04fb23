//! Greedy per-class non-maximum suppression.

use super::{iou, Detection};

/// Suppresses overlapping same-class detections, keeping the higher-scored
/// one. Two kept detections of the same class never overlap with IoU above
/// `iou_thresh`. Ties in score break on input position, so the result is
/// deterministic.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .expect("detection scores are finite")
            .then(a.cmp(&b))
    });

    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i]);
        for &j in &order[rank + 1..] {
            if suppressed[j] || dets[j].class_id != dets[i].class_id {
                continue;
            }
            if iou(&dets[i].bbox, &dets[j].bbox) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::super::{BBox, Detection};
    use super::*;

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, class_id: usize, score: f64) -> Detection {
        Detection::new(BBox::new(x0, y0, x1, y1).unwrap(), class_id, score).unwrap()
    }

    /// Reference oracle: literal restatement of greedy suppression, one pass
    /// per kept box, no shared bookkeeping with the implementation.
    pub(crate) fn nms_oracle(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
        let mut remaining: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
        remaining.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
        let mut kept = Vec::new();
        while !remaining.is_empty() {
            let (_, best) = remaining.remove(0);
            kept.push(best);
            remaining.retain(|(_, d)| {
                d.class_id != best.class_id || iou(&d.bbox, &best.bbox) <= iou_thresh
            });
        }
        kept
    }

    #[test]
    fn identical_boxes_keep_highest_score() {
        let a = det(0.0, 0.0, 4.0, 4.0, 0, 0.9);
        let b = det(0.0, 0.0, 4.0, 4.0, 0, 0.8);
        assert_eq!(nms(&[b, a], 0.5), vec![a]);
    }

    #[test]
    fn disjoint_boxes_both_kept() {
        let a = det(0.0, 0.0, 4.0, 4.0, 0, 0.9);
        let b = det(10.0, 10.0, 14.0, 14.0, 0, 0.8);
        assert_eq!(nms(&[a, b], 0.5).len(), 2);
    }

    #[test]
    fn empty_input_empty_output() {
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn different_classes_never_suppress() {
        let a = det(0.0, 0.0, 4.0, 4.0, 0, 0.9);
        let b = det(0.0, 0.0, 4.0, 4.0, 1, 0.8);
        assert_eq!(nms(&[a, b], 0.5).len(), 2);
    }

    #[test]
    fn overlap_chain_keeps_ends() {
        // A-B IoU 0.6, B-C IoU 0.6, A-C IoU 0.1; expect {A, C} at thresh 0.5.
        // Interval boxes: IoU of [0,1]x[0,h] shifted by s is (h-s)/(h+s) in 1D.
        let a = det(0.0, 0.0, 1.0, 8.0, 0, 0.9);
        let b = det(0.0, 2.0, 1.0, 10.0, 0, 0.8);
        let c = det(0.0, 4.0, 1.0, 12.0, 0, 0.7);
        assert!((iou(&a.bbox, &b.bbox) - 0.6).abs() < 1e-12);
        assert!((iou(&b.bbox, &c.bbox) - 0.6).abs() < 1e-12);
        assert!(iou(&a.bbox, &c.bbox) < 0.5);
        let kept = nms(&[a, b, c], 0.5);
        assert_eq!(kept, vec![a, c]);
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(0..=10);
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    let x0 = rng.random_range(0.0..20.0);
                    let y0 = rng.random_range(0.0..20.0);
                    det(
                        x0,
                        y0,
                        x0 + rng.random_range(1.0..10.0),
                        y0 + rng.random_range(1.0..10.0),
                        rng.random_range(0..3),
                        rng.random_range(0.0..1.0),
                    )
                })
                .collect();
            let thr = rng.random_range(0.0..1.0);
            assert_eq!(nms(&dets, thr), nms_oracle(&dets, thr));
        }
    }

    #[test]
    fn kept_pairs_respect_threshold() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let dets: Vec<Detection> = (0..8)
                .map(|_| {
                    let x0 = rng.random_range(0.0..10.0);
                    let y0 = rng.random_range(0.0..10.0);
                    det(
                        x0,
                        y0,
                        x0 + rng.random_range(1.0..8.0),
                        y0 + rng.random_range(1.0..8.0),
                        rng.random_range(0..2),
                        rng.random_range(0.0..1.0),
                    )
                })
                .collect();
            let kept = nms(&dets, 0.4);
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    if a.class_id == b.class_id {
                        assert!(iou(&a.bbox, &b.bbox) <= 0.4);
                    }
                }
            }
        }
    }
}
