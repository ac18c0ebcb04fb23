//! Detection heads: per-anchor class logits and box deltas from the last
//! backbone feature map.

use ndarray::Array3;
use rand::Rng;

use crate::nn::{Conv2d, Tensor4};

/// Score prior for the classification head bias so an untrained head emits
/// probabilities near this value instead of 0.5.
pub const CLS_SCORE_PRIOR: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct DetectorHeads {
    pub cls: Conv2d,
    pub reg: Conv2d,
    pub anchors_per_cell: usize,
    pub num_classes: usize,
}

impl DetectorHeads {
    pub fn new(
        c_in: usize,
        anchors_per_cell: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut cls = Conv2d::new(c_in, anchors_per_cell * num_classes, 3, 1, true, rng);
        let mut reg = Conv2d::new(c_in, anchors_per_cell * 4, 3, 1, true, rng);
        // Small head weights plus a negative classification bias keep the
        // initial focal loss stable and initial scores near the prior.
        cls.weight.value.mapv_inplace(|v| v * 0.1);
        reg.weight.value.mapv_inplace(|v| v * 0.1);
        let bias = -((1.0 - CLS_SCORE_PRIOR) / CLS_SCORE_PRIOR).ln();
        if let Some(b) = cls.bias.as_mut() {
            b.value.fill(bias);
        }
        DetectorHeads {
            cls,
            reg,
            anchors_per_cell,
            num_classes,
        }
    }

    /// Forward both heads. Returns `(class_logits, box_deltas)` shaped
    /// `(n, anchors, classes)` and `(n, anchors, 4)`, anchor-major in the
    /// same order as the anchor grid: cells row-major, then per-cell anchor.
    pub fn forward(&mut self, feature: &Tensor4, cache: bool) -> (Array3<f64>, Array3<f64>) {
        let cls_map = self.cls.forward(feature, cache);
        let reg_map = self.reg.forward(feature, cache);
        (
            to_anchor_major(&cls_map, self.anchors_per_cell, self.num_classes),
            to_anchor_major(&reg_map, self.anchors_per_cell, 4),
        )
    }

    /// Backward both heads; returns the gradient on the shared feature map.
    pub fn backward(
        &mut self,
        d_logits: &Array3<f64>,
        d_deltas: &Array3<f64>,
        grid_hw: (usize, usize),
        param_grads: bool,
    ) -> Tensor4 {
        let d_cls_map = from_anchor_major(d_logits, self.anchors_per_cell, grid_hw);
        let d_reg_map = from_anchor_major(d_deltas, self.anchors_per_cell, grid_hw);
        let mut d_feature = self.cls.backward(&d_cls_map, param_grads);
        d_feature += &self.reg.backward(&d_reg_map, param_grads);
        d_feature
    }

    pub fn clear_caches(&mut self) {
        self.cls.clear_cache();
        self.reg.clear_cache();
    }
}

/// `(n, a_pc * k, h, w)` feature layout to `(n, h*w*a_pc, k)` anchor-major
/// layout, anchor index `(y*w + x)*a_pc + a`.
fn to_anchor_major(map: &Tensor4, anchors_per_cell: usize, k: usize) -> Array3<f64> {
    let (n, c, h, w) = map.dim();
    assert_eq!(c, anchors_per_cell * k);
    let mut out = Array3::zeros((n, h * w * anchors_per_cell, k));
    for ni in 0..n {
        for a in 0..anchors_per_cell {
            for ki in 0..k {
                let ch = a * k + ki;
                for y in 0..h {
                    for x in 0..w {
                        out[[ni, (y * w + x) * anchors_per_cell + a, ki]] = map[[ni, ch, y, x]];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`to_anchor_major`].
fn from_anchor_major(grad: &Array3<f64>, anchors_per_cell: usize, grid_hw: (usize, usize)) -> Tensor4 {
    let (n, anchors, k) = grad.dim();
    let (h, w) = grid_hw;
    assert_eq!(anchors, h * w * anchors_per_cell);
    let mut out = Tensor4::zeros((n, anchors_per_cell * k, h, w));
    for ni in 0..n {
        for a in 0..anchors_per_cell {
            for ki in 0..k {
                let ch = a * k + ki;
                for y in 0..h {
                    for x in 0..w {
                        out[[ni, ch, y, x]] = grad[[ni, (y * w + x) * anchors_per_cell + a, ki]];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn layout_roundtrip_is_exact() {
        let map = Tensor4::from_shape_fn((2, 6, 3, 3), |(n, c, y, x)| {
            (n * 1000 + c * 100 + y * 10 + x) as f64
        });
        let am = to_anchor_major(&map, 2, 3);
        assert_eq!(am.dim(), (2, 18, 3));
        let back = from_anchor_major(&am, 2, (3, 3));
        assert_eq!(map, back);
    }

    #[test]
    fn anchor_order_matches_grid_convention() {
        // One anchor per cell, k=1: anchor index must equal y*w + x.
        let map = Tensor4::from_shape_fn((1, 1, 2, 4), |(_, _, y, x)| (y * 4 + x) as f64);
        let am = to_anchor_major(&map, 1, 1);
        for i in 0..8 {
            assert_eq!(am[[0, i, 0]], i as f64);
        }
    }

    #[test]
    fn untrained_head_scores_near_prior() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut heads = DetectorHeads::new(8, 6, 3, &mut rng);
        heads.cls.weight.value.fill(0.0);
        let feature = Tensor4::from_shape_fn((1, 8, 4, 4), |(_, c, y, x)| {
            ((c + y + x) as f64 * 0.3).sin()
        });
        let (logits, _) = heads.forward(&feature, false);
        for &z in logits.iter() {
            let score = 1.0 / (1.0 + (-z).exp());
            assert!((score - CLS_SCORE_PRIOR).abs() < 1e-9);
        }
    }
}
