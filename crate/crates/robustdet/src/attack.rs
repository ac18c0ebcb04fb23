//! Adversarial example crafting against the detector (and the classifier
//! used for backbone pretraining).
//!
//! All attacks run the model in inference mode, so crafting can never touch
//! running statistics, and they only ever request input gradients, so
//! parameter gradients are untouched too. Every iteration projects the
//! perturbation onto the l-inf ball and the image range; debug builds assert
//! both after each step.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::geom::{build_anchors, GroundTruth};
use crate::loss::{cls_loss_with_grad, loc_loss_with_grad, match_batch};
use crate::model::{ClassifierModel, DetectorModel, ForwardMode};
use crate::nn::Tensor4;
use crate::{Error, Result};

/// Which detection loss the attack maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Cls,
    Reg,
    ClsReg,
}

impl LossMode {
    fn wants_cls(self) -> bool {
        matches!(self, LossMode::Cls | LossMode::ClsReg)
    }

    fn wants_reg(self) -> bool {
        matches!(self, LossMode::Reg | LossMode::ClsReg)
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossMode::Cls => write!(f, "cls"),
            LossMode::Reg => write!(f, "reg"),
            LossMode::ClsReg => write!(f, "cls+reg"),
        }
    }
}

/// Attack hyperparameters. `eps`, `step_size` are fractions of the pixel
/// range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub eps: f64,
    pub step_size: f64,
    pub steps: usize,
    pub loss_mode: LossMode,
    pub random_start: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let eps = 8.0 / 255.0;
        AttackConfig {
            eps,
            step_size: eps / 4.0,
            steps: 10,
            loss_mode: LossMode::Cls,
            random_start: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps < 0.0 {
            return Err(Error::Config(format!("eps {} must be >= 0", self.eps)));
        }
        if self.steps < 1 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        if self.step_size <= 0.0 {
            return Err(Error::Config(format!(
                "step_size {} must be positive",
                self.step_size
            )));
        }
        Ok(())
    }

    pub fn fgsm(eps: f64, loss_mode: LossMode) -> Self {
        AttackConfig {
            eps,
            step_size: eps,
            steps: 1,
            loss_mode,
            random_start: false,
            seed: 0,
        }
    }
}

/// A crafted adversarial batch: `adv_images = clip(clean + delta)` with
/// `|delta| <= eps` everywhere.
#[derive(Debug, Clone)]
pub struct AdvResult {
    pub adv_images: Tensor4,
    pub delta: Tensor4,
    /// Attack loss at each gradient evaluation, one entry per iteration.
    pub loss_trace: Vec<f64>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Attack objective and its input gradient at `images`, in inference mode.
/// Parameter gradients are never computed.
pub fn attack_loss_with_grad(
    model: &mut DetectorModel,
    images: &Tensor4,
    gts: &[Vec<GroundTruth>],
    mode: LossMode,
) -> Result<(f64, Tensor4)> {
    let (_, _, h, w) = images.dim();
    let grid = build_anchors((h, w), &model.config.anchor)?;
    let matches = match_batch(&grid, gts)?;
    let output = model.forward(images, ForwardMode::Eval, true);

    let mut loss = 0.0;
    let mut d_logits = ndarray::Array3::zeros(output.class_logits.raw_dim());
    let mut d_deltas = ndarray::Array3::zeros(output.box_deltas.raw_dim());
    if mode.wants_cls() {
        let (value, grad) = cls_loss_with_grad(&output.class_logits, &matches, gts);
        loss += value;
        d_logits = grad;
    }
    if mode.wants_reg() {
        let (value, grad) = loc_loss_with_grad(&output.box_deltas, &matches, gts, &grid);
        loss += value;
        d_deltas = grad;
    }

    let d_input = model
        .backward(
            &d_logits,
            &d_deltas,
            &Default::default(),
            output.grid_hw,
            false,
            true,
        )
        .expect("input gradient requested");
    Ok((loss, d_input))
}

/// Value-only attack objective.
pub fn attack_loss(
    model: &mut DetectorModel,
    images: &Tensor4,
    gts: &[Vec<GroundTruth>],
    mode: LossMode,
) -> Result<f64> {
    let (_, _, h, w) = images.dim();
    let grid = build_anchors((h, w), &model.config.anchor)?;
    let matches = match_batch(&grid, gts)?;
    let output = model.forward(images, ForwardMode::Eval, false);
    let mut loss = 0.0;
    if mode.wants_cls() {
        loss += crate::loss::cls_loss(&output.class_logits, &matches, gts);
    }
    if mode.wants_reg() {
        loss += crate::loss::loc_loss(&output.box_deltas, &matches, gts, &grid);
    }
    Ok(loss)
}

fn debug_assert_feasible(clean: &Tensor4, adv: &Tensor4, eps: f64) {
    if cfg!(debug_assertions) {
        for (&a, &c) in adv.iter().zip(clean.iter()) {
            debug_assert!((a - c).abs() <= eps + 1e-6, "delta escaped the eps ball");
            debug_assert!((0.0..=1.0).contains(&a), "pixel escaped [0,1]");
        }
    }
}

/// Single gradient-sign step of size `eps`. Pre-clip, every component of the
/// perturbation is exactly `-eps`, `0`, or `+eps`.
pub fn fgsm(
    model: &mut DetectorModel,
    images: &Tensor4,
    gts: &[Vec<GroundTruth>],
    config: &AttackConfig,
) -> Result<AdvResult> {
    let cfg = AttackConfig {
        steps: 1,
        step_size: config.eps.max(f64::MIN_POSITIVE),
        random_start: false,
        ..config.clone()
    };
    pgd(model, images, gts, &cfg)
}

/// Iterated projected gradient-sign attack.
pub fn pgd(
    model: &mut DetectorModel,
    images: &Tensor4,
    gts: &[Vec<GroundTruth>],
    config: &AttackConfig,
) -> Result<AdvResult> {
    config.validate()?;
    let mut delta = Tensor4::zeros(images.raw_dim());
    if config.random_start && config.eps > 0.0 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        for d in delta.iter_mut() {
            *d = rng.random_range(-config.eps..=config.eps);
        }
    }
    let mut adv = images + &delta;
    adv.mapv_inplace(|v| v.clamp(0.0, 1.0));
    debug_assert_feasible(images, &adv, config.eps);

    let mut loss_trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let (loss, grad) = attack_loss_with_grad(model, &adv, gts, config.loss_mode)?;
        loss_trace.push(loss);
        ndarray::Zip::from(&mut delta)
            .and(&adv)
            .and(images)
            .and(&grad)
            .for_each(|d, &a, &x, &g| {
                let stepped = (a - x) + config.step_size * sign(g);
                *d = stepped.clamp(-config.eps, config.eps);
            });
        adv = images + &delta;
        adv.mapv_inplace(|v| v.clamp(0.0, 1.0));
        debug_assert_feasible(images, &adv, config.eps);
    }
    let delta = &adv - images;
    Ok(AdvResult {
        adv_images: adv,
        delta,
        loss_trace,
    })
}

/// Random-start single-step crafting: uniform init in the eps ball, one sign
/// step of `1.25 * eps`, then projection. The overshooting step size means
/// most components saturate at the ball boundary. Crafts against the
/// classification loss.
pub fn fast_single_step(
    model: &mut DetectorModel,
    images: &Tensor4,
    gts: &[Vec<GroundTruth>],
    eps: f64,
    seed: u64,
) -> Result<AdvResult> {
    fast_single_step_with_mode(model, images, gts, eps, seed, LossMode::Cls)
}

/// [`fast_single_step`] with an explicit crafting loss, for the loss-term
/// ablation.
pub fn fast_single_step_with_mode(
    model: &mut DetectorModel,
    images: &Tensor4,
    gts: &[Vec<GroundTruth>],
    eps: f64,
    seed: u64,
    mode: LossMode,
) -> Result<AdvResult> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("eps {eps} must be positive")));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut delta = Tensor4::zeros(images.raw_dim());
    for d in delta.iter_mut() {
        *d = rng.random_range(-eps..=eps);
    }
    let mut adv = images + &delta;
    adv.mapv_inplace(|v| v.clamp(0.0, 1.0));

    let (loss, grad) = attack_loss_with_grad(model, &adv, gts, mode)?;
    ndarray::Zip::from(&mut delta)
        .and(&adv)
        .and(images)
        .and(&grad)
        .for_each(|d, &a, &x, &g| {
            *d = single_step_update(a - x, sign(g), eps);
        });
    adv = images + &delta;
    adv.mapv_inplace(|v| v.clamp(0.0, 1.0));
    debug_assert_feasible(images, &adv, eps);
    let delta = &adv - images;
    Ok(AdvResult {
        adv_images: adv,
        delta,
        loss_trace: vec![loss],
    })
}

/// The single-step update rule: overshooting sign step, clamped to the ball.
pub fn single_step_update(delta0: f64, grad_sign: f64, eps: f64) -> f64 {
    (delta0 + 1.25 * eps * grad_sign).clamp(-eps, eps)
}

/// Crafts a batch on `source` and returns it for evaluation on a different
/// model. The two models must share the class space.
pub fn transfer_attack(
    source: &mut DetectorModel,
    target: &DetectorModel,
    images: &Tensor4,
    gts: &[Vec<GroundTruth>],
    config: &AttackConfig,
) -> Result<AdvResult> {
    if source.config.num_classes != target.config.num_classes {
        return Err(Error::Config(format!(
            "class count mismatch: source {} vs target {}",
            source.config.num_classes, target.config.num_classes
        )));
    }
    pgd(source, images, gts, config)
}

/// Softmax cross-entropy and its logit gradient, averaged over the batch.
pub fn cross_entropy_with_grad(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let (n, c) = logits.dim();
    assert_eq!(labels.len(), n);
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, c));
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp_sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + exp_sum.ln();
        loss += log_z - row[labels[i]];
        for j in 0..c {
            let softmax = (row[j] - max).exp() / exp_sum;
            grad[[i, j]] = (softmax - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// PGD against the classifier, maximizing cross-entropy on the true labels.
pub fn pgd_classifier(
    model: &mut ClassifierModel,
    images: &Tensor4,
    labels: &[usize],
    config: &AttackConfig,
) -> Result<AdvResult> {
    config.validate()?;
    let mut delta = Tensor4::zeros(images.raw_dim());
    if config.random_start && config.eps > 0.0 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        for d in delta.iter_mut() {
            *d = rng.random_range(-config.eps..=config.eps);
        }
    }
    let mut adv = images + &delta;
    adv.mapv_inplace(|v| v.clamp(0.0, 1.0));

    let mut loss_trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let logits = model.forward(&adv, ForwardMode::Eval, true);
        let (loss, d_logits) = cross_entropy_with_grad(&logits, labels);
        loss_trace.push(loss);
        let grad = model
            .backward(&d_logits, false, true)
            .expect("input gradient requested");
        ndarray::Zip::from(&mut delta)
            .and(&adv)
            .and(images)
            .and(&grad)
            .for_each(|d, &a, &x, &g| {
                let stepped = (a - x) + config.step_size * sign(g);
                *d = stepped.clamp(-config.eps, config.eps);
            });
        adv = images + &delta;
        adv.mapv_inplace(|v| v.clamp(0.0, 1.0));
        debug_assert_feasible(images, &adv, config.eps);
    }
    let delta = &adv - images;
    Ok(AdvResult {
        adv_images: adv,
        delta,
        loss_trace,
    })
}
