//! Training objectives: focal classification loss, smooth-L1 localization
//! loss, the block-feature imitation loss, and the clean/adversarial phase
//! objectives that combine them.
//!
//! Every loss here is computed together with its analytic gradient with
//! respect to the model outputs it consumes; the model's backward pass turns
//! those into parameter or input gradients.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::geom::{encode_deltas, AnchorGrid, Assignment, GroundTruth, MatchResult};
use crate::model::{Backbone, DetectorModel, DetectorOutput, ForwardMode, NUM_BLOCKS};
use crate::nn::{BnMode, Tensor4};
use crate::{par, Error, Result};

/// Focal loss weighting for the rare positive class.
pub const FOCAL_ALPHA: f64 = 0.25;
/// Focal loss focusing exponent.
pub const FOCAL_GAMMA: f64 = 2.0;
/// Smooth-L1 transition point.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Anchor matching thresholds.
pub const MATCH_POS_THR: f64 = 0.5;
pub const MATCH_NEG_THR: f64 = 0.4;

/// Imitation loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImitationConfig {
    /// Weight of the imitation term in the total objective.
    pub lambda: f64,
    /// Norm order, 1 or 2. The per-block distance is the p-norm of the
    /// feature difference normalized per element, so a constant difference
    /// of c yields exactly c.
    pub p: u32,
    /// Which blocks participate, 1-based.
    pub blocks: Vec<usize>,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        ImitationConfig {
            lambda: 0.5,
            p: 2,
            blocks: vec![1, 2, 3, 4],
        }
    }
}

impl ImitationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.p != 1 && self.p != 2 {
            return Err(Error::Config(format!(
                "imitation norm p={} not in {{1,2}}",
                self.p
            )));
        }
        if self.blocks.is_empty() || self.blocks.iter().any(|&b| b == 0 || b > NUM_BLOCKS) {
            return Err(Error::Config(format!(
                "imitation blocks {:?} must be a nonempty subset of 1..={NUM_BLOCKS}",
                self.blocks
            )));
        }
        Ok(())
    }
}

/// Per-term loss values; `total = cls + loc + lambda * imi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub loc: f64,
    pub imi: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(cls: f64, loc: f64, imi: f64, lambda: f64) -> Self {
        LossBreakdown {
            cls,
            loc,
            imi,
            lambda,
            total: cls + loc + lambda * imi,
        }
    }
}

/// Gradients of an objective with respect to the detector outputs.
#[derive(Debug)]
pub struct ObjectiveGrads {
    pub d_logits: Array3<f64>,
    pub d_deltas: Array3<f64>,
    pub d_block_features: [Option<Tensor4>; NUM_BLOCKS],
}

/// Matches every image's anchors against its ground truths.
pub fn match_batch(grid: &AnchorGrid, gts: &[Vec<GroundTruth>]) -> Result<Vec<MatchResult>> {
    let matched: Vec<Result<MatchResult>> = par::map_indexed(gts.len(), |i| {
        crate::geom::match_anchors(grid, &gts[i], MATCH_POS_THR, MATCH_NEG_THR)
    });
    matched.into_iter().collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Numerically stable `ln(sigmoid(z))`.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(1.0 + (-z).exp()).ln()
    } else {
        z - (1.0 + z.exp()).ln()
    }
}

/// Focal binary cross-entropy for one logit/target pair, with its gradient.
fn focal_term(z: f64, positive: bool) -> (f64, f64) {
    let s = sigmoid(z);
    let q = 1.0 - s;
    if positive {
        // loss = -alpha * q^gamma * ln(s)
        let ln_s = log_sigmoid(z);
        let loss = -FOCAL_ALPHA * q.powf(FOCAL_GAMMA) * ln_s;
        let grad = FOCAL_ALPHA
            * (FOCAL_GAMMA * s * q.powf(FOCAL_GAMMA) * ln_s - q.powf(FOCAL_GAMMA + 1.0));
        (loss, grad)
    } else {
        // loss = -(1-alpha) * s^gamma * ln(1-s)
        let ln_q = log_sigmoid(-z);
        let loss = -(1.0 - FOCAL_ALPHA) * s.powf(FOCAL_GAMMA) * ln_q;
        let grad = (1.0 - FOCAL_ALPHA)
            * (s.powf(FOCAL_GAMMA + 1.0) - FOCAL_GAMMA * q * s.powf(FOCAL_GAMMA) * ln_q);
        (loss, grad)
    }
}

/// Focal classification loss over positive and negative anchors, normalized
/// by the number of positives (at least 1). Returns the loss and its
/// gradient with respect to the logits.
pub fn cls_loss_with_grad(
    logits: &Array3<f64>,
    matches: &[MatchResult],
    gts: &[Vec<GroundTruth>],
) -> (f64, Array3<f64>) {
    let (n, anchors, classes) = logits.dim();
    assert_eq!(matches.len(), n, "one match result per image");
    let num_pos: usize = matches.iter().map(|m| m.num_positive()).sum();
    let norm = num_pos.max(1) as f64;

    let mut total = 0.0;
    let mut d_logits = Array3::zeros((n, anchors, classes));
    for img in 0..n {
        for a in 0..anchors {
            match matches[img].assignments[a] {
                Assignment::Ignore => {}
                Assignment::Negative => {
                    for c in 0..classes {
                        let (l, g) = focal_term(logits[[img, a, c]], false);
                        total += l;
                        d_logits[[img, a, c]] = g / norm;
                    }
                }
                Assignment::Positive(gi) => {
                    let target = gts[img][gi].class_id;
                    for c in 0..classes {
                        let (l, g) = focal_term(logits[[img, a, c]], c == target);
                        total += l;
                        d_logits[[img, a, c]] = g / norm;
                    }
                }
            }
        }
    }
    (total / norm, d_logits)
}

/// Value-only focal classification loss.
pub fn cls_loss(logits: &Array3<f64>, matches: &[MatchResult], gts: &[Vec<GroundTruth>]) -> f64 {
    cls_loss_with_grad(logits, matches, gts).0
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < SMOOTH_L1_BETA {
        (0.5 * d * d / SMOOTH_L1_BETA, d / SMOOTH_L1_BETA)
    } else {
        (d.abs() - 0.5 * SMOOTH_L1_BETA, d.signum())
    }
}

/// Smooth-L1 localization loss over positive anchors, averaged over the four
/// delta coordinates and the positive count. Zero when nothing is positive.
pub fn loc_loss_with_grad(
    deltas: &Array3<f64>,
    matches: &[MatchResult],
    gts: &[Vec<GroundTruth>],
    grid: &AnchorGrid,
) -> (f64, Array3<f64>) {
    let (n, anchors, four) = deltas.dim();
    assert_eq!(four, 4);
    assert_eq!(anchors, grid.anchors.len(), "deltas cover every anchor");
    let num_pos: usize = matches.iter().map(|m| m.num_positive()).sum();
    let norm = 4.0 * num_pos.max(1) as f64;

    let mut total = 0.0;
    let mut d_deltas = Array3::zeros((n, anchors, 4));
    for img in 0..n {
        for a in 0..anchors {
            if let Assignment::Positive(gi) = matches[img].assignments[a] {
                let target = encode_deltas(&grid.anchors[a], &gts[img][gi].bbox);
                for k in 0..4 {
                    let (l, g) = smooth_l1(deltas[[img, a, k]] - target[k]);
                    total += l;
                    d_deltas[[img, a, k]] = g / norm;
                }
            }
        }
    }
    (total / norm, d_deltas)
}

/// Value-only localization loss.
pub fn loc_loss(
    deltas: &Array3<f64>,
    matches: &[MatchResult],
    gts: &[Vec<GroundTruth>],
    grid: &AnchorGrid,
) -> f64 {
    loc_loss_with_grad(deltas, matches, gts, grid).0
}

/// Per-element-normalized p-norm distance between aligned block features,
/// summed over the configured blocks. Returns the loss and the gradient with
/// respect to `features` (the trainable side).
pub fn imitation_loss_with_grad(
    features: &[Tensor4],
    ref_features: &[Tensor4],
    config: &ImitationConfig,
) -> Result<(f64, [Option<Tensor4>; NUM_BLOCKS])> {
    config.validate()?;
    if features.len() != NUM_BLOCKS || ref_features.len() != NUM_BLOCKS {
        return Err(Error::ShapeMismatch {
            context: "imitation feature lists".into(),
            expected: format!("{NUM_BLOCKS} blocks"),
            got: format!("{} vs {}", features.len(), ref_features.len()),
        });
    }
    let mut total = 0.0;
    let mut grads: [Option<Tensor4>; NUM_BLOCKS] = Default::default();
    for &block in &config.blocks {
        let idx = block - 1;
        let f = &features[idx];
        let r = &ref_features[idx];
        if f.dim() != r.dim() {
            return Err(Error::ShapeMismatch {
                context: format!("imitation block {block}"),
                expected: format!("{:?}", f.dim()),
                got: format!("{:?}", r.dim()),
            });
        }
        let count = f.len() as f64;
        match config.p {
            1 => {
                let mut sum = 0.0;
                for (&a, &b) in f.iter().zip(r.iter()) {
                    sum += (a - b).abs();
                }
                total += sum / count;
                let mut g = Tensor4::zeros(f.raw_dim());
                ndarray::Zip::from(&mut g).and(f).and(r).for_each(|g, &a, &b| {
                    *g = (a - b).signum() / count;
                });
                grads[idx] = Some(g);
            }
            2 => {
                let mut ss = 0.0;
                for (&a, &b) in f.iter().zip(r.iter()) {
                    let d = a - b;
                    ss += d * d;
                }
                let value = (ss / count).sqrt();
                total += value;
                if value > 0.0 {
                    let scale = 1.0 / (count * value);
                    let mut g = Tensor4::zeros(f.raw_dim());
                    ndarray::Zip::from(&mut g).and(f).and(r).for_each(|g, &a, &b| {
                        *g = (a - b) * scale;
                    });
                    grads[idx] = Some(g);
                }
                // At exactly zero distance the subgradient is zero.
            }
            _ => unreachable!("validated above"),
        }
    }
    Ok((total, grads))
}

/// Value-only imitation loss.
pub fn imitation_loss(
    features: &[Tensor4],
    ref_features: &[Tensor4],
    config: &ImitationConfig,
) -> Result<f64> {
    imitation_loss_with_grad(features, ref_features, config).map(|(v, _)| v)
}

/// Combines the detection losses (and optional imitation term) on an
/// already-computed forward pass.
pub fn detection_objective(
    output: &DetectorOutput,
    gts: &[Vec<GroundTruth>],
    grid: &AnchorGrid,
    imitation: Option<(&ImitationConfig, &[Tensor4])>,
) -> Result<(LossBreakdown, ObjectiveGrads)> {
    let matches = match_batch(grid, gts)?;
    let (cls, d_logits) = cls_loss_with_grad(&output.class_logits, &matches, gts);
    let (loc, d_deltas) = loc_loss_with_grad(&output.box_deltas, &matches, gts, grid);

    let (imi, lambda, d_block_features) = match imitation {
        Some((config, ref_features)) => {
            let (value, mut grads) =
                imitation_loss_with_grad(&output.block_features, ref_features, config)?;
            // The objective carries lambda * imi, so scale the gradients.
            for g in grads.iter_mut().flatten() {
                g.mapv_inplace(|v| v * config.lambda);
            }
            (value, config.lambda, grads)
        }
        None => (0.0, 0.0, Default::default()),
    };

    Ok((
        LossBreakdown::new(cls, loc, imi, lambda),
        ObjectiveGrads {
            d_logits,
            d_deltas,
            d_block_features,
        },
    ))
}

/// Runs the fixed reference backbone in frozen mode on the same inputs.
pub fn reference_features(reference: &mut Backbone, images: &Tensor4) -> Vec<Tensor4> {
    reference.forward(images, BnMode::Frozen, false)
}

/// Clean-phase objective: detection losses plus the imitation term, all on
/// clean inputs. Leaves the forward pass cached on the model so the caller
/// can backprop `ObjectiveGrads` immediately.
pub fn phase1_objective(
    model: &mut DetectorModel,
    reference: Option<&mut Backbone>,
    images: &Tensor4,
    gts: &[Vec<GroundTruth>],
    imitation: Option<&ImitationConfig>,
    mode: ForwardMode,
) -> Result<(LossBreakdown, ObjectiveGrads, (usize, usize))> {
    let (_, _, h, w) = images.dim();
    let grid = crate::geom::build_anchors((h, w), &model.config.anchor)?;
    let output = model.forward(images, mode, true);
    let ref_feats = match (imitation, reference) {
        (Some(_), Some(r)) => Some(reference_features(r, images)),
        (Some(_), None) => {
            return Err(Error::Config(
                "imitation loss requires a reference backbone".into(),
            ))
        }
        _ => None,
    };
    let imi = imitation.zip(ref_feats.as_deref());
    let (breakdown, grads) = detection_objective(&output, gts, &grid, imi)?;
    Ok((breakdown, grads, output.grid_hw))
}

/// Adversarial-phase objective: identical structure to [`phase1_objective`]
/// but evaluated at `adv_images`, whose perturbation against `clean_images`
/// must stay inside the `eps` ball and the pixel range.
#[allow(clippy::too_many_arguments)]
pub fn phase2_objective(
    model: &mut DetectorModel,
    reference: Option<&mut Backbone>,
    clean_images: &Tensor4,
    adv_images: &Tensor4,
    eps: f64,
    gts: &[Vec<GroundTruth>],
    imitation: Option<&ImitationConfig>,
    mode: ForwardMode,
) -> Result<(LossBreakdown, ObjectiveGrads, (usize, usize))> {
    if clean_images.dim() != adv_images.dim() {
        return Err(Error::ShapeMismatch {
            context: "adversarial batch".into(),
            expected: format!("{:?}", clean_images.dim()),
            got: format!("{:?}", adv_images.dim()),
        });
    }
    let mut max_delta: f64 = 0.0;
    let mut range_ok = true;
    for (&a, &c) in adv_images.iter().zip(clean_images.iter()) {
        max_delta = max_delta.max((a - c).abs());
        range_ok &= (0.0..=1.0).contains(&a);
    }
    if max_delta > eps + 1e-6 || !range_ok {
        return Err(Error::InfeasiblePerturbation(format!(
            "max |delta| = {max_delta:.6} vs eps = {eps:.6}, pixels in range: {range_ok}"
        )));
    }
    phase1_objective(model, reference, adv_images, gts, imitation, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{build_anchors, AnchorConfig, BBox};
    use crate::model::DetectorConfig;

    fn rel_err(analytic: f64, numeric: f64) -> f64 {
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        (analytic - numeric).abs() / denom
    }

    fn tiny_model(seed: u64) -> DetectorModel {
        DetectorModel::new(DetectorConfig {
            widths: [2, 2, 2, 2],
            seed,
            ..DetectorConfig::default()
        })
    }

    fn tiny_batch(n: usize) -> Tensor4 {
        Tensor4::from_shape_fn((n, 3, 16, 16), |(b, c, y, x)| {
            0.5 + 0.25 * ((b * 11 + c * 5 + y * 3 + x * 2) as f64 * 0.11).sin()
        })
    }

    fn tiny_gts(n: usize) -> Vec<Vec<GroundTruth>> {
        (0..n)
            .map(|i| {
                vec![GroundTruth {
                    bbox: BBox::new(1.0 + i as f64, 2.0, 13.0, 14.0).unwrap(),
                    class_id: i % 3,
                }]
            })
            .collect()
    }

    /// Literal focal-loss formula, expanded by hand.
    fn focal_oracle(z: f64, positive: bool) -> f64 {
        let p = 1.0 / (1.0 + (-z).exp());
        let (p_t, alpha_t) = if positive {
            (p, FOCAL_ALPHA)
        } else {
            (1.0 - p, 1.0 - FOCAL_ALPHA)
        };
        -alpha_t * (1.0 - p_t).powf(FOCAL_GAMMA) * p_t.ln()
    }

    #[test]
    fn saturated_logits_give_negligible_loss() {
        let grid = build_anchors((16, 16), &AnchorConfig::default()).unwrap();
        let a = grid.anchors.len();
        let gts = tiny_gts(1);
        let matches = match_batch(&grid, &gts).unwrap();
        let mut logits = Array3::from_elem((1, a, 3), -30.0);
        for (ai, m) in matches[0].assignments.iter().enumerate() {
            if let Assignment::Positive(gi) = m {
                logits[[0, ai, gts[0][*gi].class_id]] = 30.0;
            }
        }
        let loss = cls_loss(&logits, &matches, &gts);
        assert!(loss < 1e-4, "saturated loss {loss}");
    }

    #[test]
    fn all_ignore_matches_zero_loss() {
        let grid = build_anchors((16, 16), &AnchorConfig::default()).unwrap();
        let a = grid.anchors.len();
        let matches = vec![MatchResult {
            assignments: vec![Assignment::Ignore; a],
        }];
        let logits = Array3::from_elem((1, a, 3), 0.3);
        let gts = vec![vec![]];
        assert_eq!(cls_loss(&logits, &matches, &gts), 0.0);
    }

    #[test]
    fn focal_matches_hand_formula_on_two_anchors() {
        // One positive anchor and one negative anchor, three classes.
        let grid = AnchorGrid {
            anchors: vec![
                BBox::new(0.0, 0.0, 8.0, 8.0).unwrap(),
                BBox::new(8.0, 8.0, 16.0, 16.0).unwrap(),
            ],
            config: AnchorConfig::default(),
            image_size: (16, 16),
        };
        let gts = vec![vec![GroundTruth {
            bbox: BBox::new(0.0, 0.0, 8.0, 8.0).unwrap(),
            class_id: 1,
        }]];
        let matches = match_batch(&grid, &gts).unwrap();
        assert_eq!(matches[0].assignments[0], Assignment::Positive(0));
        assert_eq!(matches[0].assignments[1], Assignment::Negative);

        let mut logits = Array3::zeros((1, 2, 3));
        logits[[0, 0, 0]] = -0.3;
        logits[[0, 0, 1]] = 0.8;
        logits[[0, 0, 2]] = 0.1;
        logits[[0, 1, 0]] = 0.5;
        logits[[0, 1, 1]] = -1.2;
        logits[[0, 1, 2]] = 0.0;

        // Hand accumulation: anchor 0 positive for class 1, anchor 1 negative.
        let expected = focal_oracle(-0.3, false)
            + focal_oracle(0.8, true)
            + focal_oracle(0.1, false)
            + focal_oracle(0.5, false)
            + focal_oracle(-1.2, false)
            + focal_oracle(0.0, false);
        let got = cls_loss(&logits, &matches, &gts);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn focal_gradient_matches_central_difference() {
        for &(z, positive) in &[
            (0.4, true),
            (-1.3, true),
            (2.0, false),
            (-0.6, false),
            (0.0, false),
        ] {
            let h = 1e-6;
            let (_, g) = focal_term(z, positive);
            let numeric = (focal_term(z + h, positive).0 - focal_term(z - h, positive).0) / (2.0 * h);
            assert!(rel_err(g, numeric) < 1e-7, "z={z} positive={positive}");
        }
    }

    #[test]
    fn perfect_deltas_zero_loc_loss() {
        let grid = build_anchors((16, 16), &AnchorConfig::default()).unwrap();
        let gts = tiny_gts(1);
        let matches = match_batch(&grid, &gts).unwrap();
        let mut deltas = Array3::zeros((1, grid.anchors.len(), 4));
        for (ai, m) in matches[0].assignments.iter().enumerate() {
            if let Assignment::Positive(gi) = m {
                let t = encode_deltas(&grid.anchors[ai], &gts[0][*gi].bbox);
                for k in 0..4 {
                    deltas[[0, ai, k]] = t[k];
                }
            }
        }
        assert_eq!(loc_loss(&deltas, &matches, &gts, &grid), 0.0);
    }

    #[test]
    fn no_positives_zero_loc_loss() {
        let grid = build_anchors((16, 16), &AnchorConfig::default()).unwrap();
        let matches = vec![MatchResult {
            assignments: vec![Assignment::Negative; grid.anchors.len()],
        }];
        let deltas = Array3::from_elem((1, grid.anchors.len(), 4), 3.0);
        assert_eq!(loc_loss(&deltas, &matches, &[vec![]], &grid), 0.0);
    }

    #[test]
    fn single_positive_smooth_l1_hand_value() {
        let grid = AnchorGrid {
            anchors: vec![BBox::new(0.0, 0.0, 8.0, 8.0).unwrap()],
            config: AnchorConfig::default(),
            image_size: (16, 16),
        };
        let gts = vec![vec![GroundTruth {
            bbox: BBox::new(0.0, 0.0, 8.0, 8.0).unwrap(),
            class_id: 0,
        }]];
        let matches = match_batch(&grid, &gts).unwrap();
        // Error vector (0.5, 0, 0, 0): smooth-l1 is 0.125, averaged over 4.
        let mut deltas = Array3::zeros((1, 1, 4));
        deltas[[0, 0, 0]] = 0.5;
        let got = loc_loss(&deltas, &matches, &gts, &grid);
        assert!((got - 0.125 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn identical_features_zero_imitation() {
        let feats: Vec<Tensor4> = (0..4)
            .map(|i| Tensor4::from_elem((1, 2, 2, 2), i as f64))
            .collect();
        let cfg = ImitationConfig::default();
        assert_eq!(imitation_loss(&feats, &feats, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_yields_the_offset() {
        let feats: Vec<Tensor4> = (0..4).map(|_| Tensor4::zeros((1, 2, 3, 3))).collect();
        let refs: Vec<Tensor4> = feats.iter().map(|f| f.mapv(|v| v + 0.1)).collect();
        let cfg = ImitationConfig {
            lambda: 1.0,
            p: 2,
            blocks: vec![2],
        };
        let got = imitation_loss(&feats, &refs, &cfg).unwrap();
        assert!((got - 0.1).abs() < 1e-12, "{got}");
        // p=1 agrees on constant offsets.
        let cfg1 = ImitationConfig { p: 1, ..cfg };
        let got1 = imitation_loss(&feats, &refs, &cfg1).unwrap();
        assert!((got1 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn imitation_is_symmetric_and_nonnegative() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let f: Vec<Tensor4> = (0..4)
                .map(|_| Tensor4::from_shape_fn((1, 2, 2, 2), |_| rng.random_range(-1.0..1.0)))
                .collect();
            let r: Vec<Tensor4> = (0..4)
                .map(|_| Tensor4::from_shape_fn((1, 2, 2, 2), |_| rng.random_range(-1.0..1.0)))
                .collect();
            let cfg = ImitationConfig::default();
            let ab = imitation_loss(&f, &r, &cfg).unwrap();
            let ba = imitation_loss(&r, &f, &cfg).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!(ab >= 0.0);
        }
    }

    #[test]
    fn imitation_gradient_matches_central_difference() {
        for p in [1u32, 2] {
            let cfg = ImitationConfig {
                lambda: 1.0,
                p,
                blocks: vec![1, 3],
            };
            let f: Vec<Tensor4> = (0..4)
                .map(|b| {
                    Tensor4::from_shape_fn((1, 2, 2, 2), |(_, c, y, x)| {
                        ((b * 13 + c * 5 + y * 3 + x) as f64 * 0.31).sin()
                    })
                })
                .collect();
            let r: Vec<Tensor4> = f
                .iter()
                .map(|t| t.mapv(|v| v * 0.9 + 0.07))
                .collect();
            let (_, grads) = imitation_loss_with_grad(&f, &r, &cfg).unwrap();
            let h = 1e-6;
            for &(block, c, y, x) in &[(0usize, 0usize, 1usize, 1usize), (2, 1, 0, 1)] {
                let mut fp = f.clone();
                fp[block][[0, c, y, x]] += h;
                let lp = imitation_loss(&fp, &r, &cfg).unwrap();
                fp[block][[0, c, y, x]] -= 2.0 * h;
                let lm = imitation_loss(&fp, &r, &cfg).unwrap();
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = grads[block].as_ref().unwrap()[[0, c, y, x]];
                assert!(
                    rel_err(analytic, numeric) < 1e-6,
                    "p={p} block={block}: {analytic} vs {numeric}"
                );
            }
            // Unselected blocks carry no gradient.
            assert!(grads[1].is_none());
            assert!(grads[3].is_none());
        }
    }

    #[test]
    fn shape_mismatch_is_structured_error() {
        let f = vec![
            Tensor4::zeros((1, 2, 2, 2)),
            Tensor4::zeros((1, 2, 2, 2)),
            Tensor4::zeros((1, 2, 2, 2)),
            Tensor4::zeros((1, 2, 2, 2)),
        ];
        let mut r = f.clone();
        r[1] = Tensor4::zeros((1, 2, 3, 3));
        let err = imitation_loss(&f, &r, &ImitationConfig::default()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn lambda_scales_linearly() {
        let mut model = tiny_model(3);
        let mut reference = model.clone_frozen_backbone();
        // Separate the reference so the imitation term is nonzero.
        for block in &mut reference.blocks {
            block.conv1.weight.value.mapv_inplace(|v| v * 1.1 + 0.01);
        }
        let images = tiny_batch(2);
        let gts = tiny_gts(2);
        let run = |model: &mut DetectorModel, reference: &mut Backbone, lambda: f64| {
            let cfg = ImitationConfig {
                lambda,
                ..ImitationConfig::default()
            };
            phase1_objective(model, Some(reference), &images, &gts, Some(&cfg), ForwardMode::Eval)
                .unwrap()
                .0
        };
        let l0 = run(&mut model, &mut reference, 0.0);
        let l1 = run(&mut model, &mut reference, 0.7);
        let l2 = run(&mut model, &mut reference, 1.4);
        assert!(l1.imi > 0.0);
        assert!((l1.total - l0.total - 0.7 * l1.imi).abs() < 1e-12);
        assert!(((l2.total - l0.total) - 2.0 * (l1.total - l0.total)).abs() < 1e-12);
        // Imitation off equals lambda zero.
        let off = phase1_objective(&mut model, None, &images, &gts, None, ForwardMode::Eval)
            .unwrap()
            .0;
        assert_eq!(off.total, l0.total);
        assert_eq!(off.total, off.cls + off.loc);
    }

    #[test]
    fn cloned_backbone_gives_zero_imitation_regardless_of_lambda() {
        let mut model = tiny_model(4);
        let mut reference = model.clone_frozen_backbone();
        let images = tiny_batch(1);
        let gts = tiny_gts(1);
        let cfg = ImitationConfig {
            lambda: 5.0,
            ..ImitationConfig::default()
        };
        let (b, _, _) = phase1_objective(
            &mut model,
            Some(&mut reference),
            &images,
            &gts,
            Some(&cfg),
            ForwardMode::Eval,
        )
        .unwrap();
        assert_eq!(b.imi, 0.0);
        assert_eq!(b.total, b.cls + b.loc);
    }

    #[test]
    fn phase2_with_zero_delta_equals_phase1() {
        let mut model = tiny_model(5);
        let mut reference = model.clone_frozen_backbone();
        let images = tiny_batch(2);
        let gts = tiny_gts(2);
        let cfg = ImitationConfig::default();
        let (p1, _, _) = phase1_objective(
            &mut model,
            Some(&mut reference),
            &images,
            &gts,
            Some(&cfg),
            ForwardMode::Eval,
        )
        .unwrap();
        let (p2, _, _) = phase2_objective(
            &mut model,
            Some(&mut reference),
            &images,
            &images,
            8.0 / 255.0,
            &gts,
            Some(&cfg),
            ForwardMode::Eval,
        )
        .unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn phase2_rejects_infeasible_delta() {
        let mut model = tiny_model(6);
        let images = tiny_batch(1);
        let adv = images.mapv(|v| (v + 0.2).min(1.0));
        let gts = tiny_gts(1);
        let err = phase2_objective(
            &mut model,
            None,
            &images,
            &adv,
            8.0 / 255.0,
            &gts,
            None,
            ForwardMode::Eval,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InfeasiblePerturbation(_)));
    }

    /// Central-difference check of the full phase objective through the
    /// model: probes parameters from every layer type plus input pixels.
    #[test]
    fn phase_objective_gradcheck() {
        let mut model = tiny_model(7);
        let mut reference = model.clone_frozen_backbone();
        // Shift the reference so imitation gradients are alive.
        for block in &mut reference.blocks {
            block.conv2.weight.value.mapv_inplace(|v| v + 0.05);
        }
        let images = tiny_batch(2);
        let gts = tiny_gts(2);
        let cfg = ImitationConfig::default();
        model.apply_norm_policy(crate::model::NormPolicy::Update);
        let mode = ForwardMode::TrainNoStatUpdate;

        let (_, grads, grid_hw) = phase1_objective(
            &mut model,
            Some(&mut reference),
            &images,
            &gts,
            Some(&cfg),
            mode,
        )
        .unwrap();
        model.zero_grads();
        let d_input = model
            .backward(
                &grads.d_logits,
                &grads.d_deltas,
                &grads.d_block_features,
                grid_hw,
                true,
                true,
            )
            .expect("input grad requested");

        let loss_value = |model: &mut DetectorModel, reference: &mut Backbone, images: &Tensor4| {
            phase1_objective(model, Some(reference), images, &gts, Some(&cfg), mode)
                .unwrap()
                .0
                .total
        };

        let h = 1e-5;
        {
            let analytic = model.backbone.blocks[0].conv1.weight.grad[[1, 5]];
            let orig = model.backbone.blocks[0].conv1.weight.value[[1, 5]];
            model.backbone.blocks[0].conv1.weight.value[[1, 5]] = orig + h;
            let lp = loss_value(&mut model, &mut reference, &images);
            model.backbone.blocks[0].conv1.weight.value[[1, 5]] = orig - h;
            let lm = loss_value(&mut model, &mut reference, &images);
            model.backbone.blocks[0].conv1.weight.value[[1, 5]] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                rel_err(analytic, numeric) <= 1e-4,
                "conv1 weight: {analytic} vs {numeric}"
            );
        }
        {
            let analytic = model.backbone.blocks[2].bn2.gamma.grad[1];
            let orig = model.backbone.blocks[2].bn2.gamma.value[1];
            model.backbone.blocks[2].bn2.gamma.value[1] = orig + h;
            let lp = loss_value(&mut model, &mut reference, &images);
            model.backbone.blocks[2].bn2.gamma.value[1] = orig - h;
            let lm = loss_value(&mut model, &mut reference, &images);
            model.backbone.blocks[2].bn2.gamma.value[1] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                rel_err(analytic, numeric) <= 1e-4,
                "bn gamma: {analytic} vs {numeric}"
            );
        }
        {
            let analytic = model.heads.cls.weight.grad[[2, 3]];
            let orig = model.heads.cls.weight.value[[2, 3]];
            model.heads.cls.weight.value[[2, 3]] = orig + h;
            let lp = loss_value(&mut model, &mut reference, &images);
            model.heads.cls.weight.value[[2, 3]] = orig - h;
            let lm = loss_value(&mut model, &mut reference, &images);
            model.heads.cls.weight.value[[2, 3]] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                rel_err(analytic, numeric) <= 1e-4,
                "head weight: {analytic} vs {numeric}"
            );
        }
        // Input pixel probes.
        let mut xp = images.clone();
        for &(n, c, y, x) in &[(0usize, 0usize, 3usize, 4usize), (1, 2, 10, 7)] {
            let analytic = d_input[[n, c, y, x]];
            let orig = xp[[n, c, y, x]];
            xp[[n, c, y, x]] = orig + h;
            let lp = loss_value(&mut model, &mut reference, &xp);
            xp[[n, c, y, x]] = orig - h;
            let lm = loss_value(&mut model, &mut reference, &xp);
            xp[[n, c, y, x]] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                rel_err(analytic, numeric) <= 1e-4,
                "input pixel ({n},{c},{y},{x}): {analytic} vs {numeric}"
            );
        }
    }
}
