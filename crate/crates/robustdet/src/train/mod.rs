//! Training pipelines: classifier pretraining (standard or adversarial) and
//! the three detector methods.
//!
//! - `STD`: standard-classifier backbone, all blocks retrained, frozen
//!   normalization statistics, clean objective throughout.
//! - `FROD`: robust-classifier backbone, one retrained block, statistics
//!   updated on the detection data, clean objective throughout. Costs
//!   exactly the same forward/backward passes per step as `STD`.
//! - `FROD_DAT`: `FROD` plus the imitation loss against a frozen copy of the
//!   initial backbone in both phases, and a switch to single-step
//!   adversarial examples at the switch epoch. Each adversarial-phase step
//!   costs one extra forward and one extra backward pass.
//!
//! Step accounting counts passes through the trained model only (crafting
//! passes included); the frozen imitation reference is a fixed auxiliary
//! network and its forwards are not model steps.

mod ablation;

pub use ablation::{run_ablation, AblationAxis, AblationRow};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::attack::{fast_single_step_with_mode, pgd, pgd_classifier, AttackConfig, LossMode};
use crate::data::{ClsSample, SceneSample};
use crate::loss::{phase1_objective, phase2_objective, ImitationConfig, LossBreakdown};
use crate::model::{
    batch_images, Backbone, Checkpoint, ClassifierModel, DetectorConfig, DetectorModel,
    ForwardMode, NormPolicy, NUM_BLOCKS,
};
use crate::{Error, Result};

/// Optimizer defaults shared by every pipeline.
pub const SGD_MOMENTUM: f64 = 0.9;
pub const WEIGHT_DECAY: f64 = 1e-4;
/// Learning rate decays by 10x after this fraction of the epochs.
pub const LR_DECAY_AT: f64 = 0.8;
pub const LR_DECAY_FACTOR: f64 = 0.1;

/// Which training pipeline runs. Exactly one executes per call; the config
/// echo in the log records which.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Std,
    Frod,
    FrodDat,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Std => write!(f, "STD"),
            Method::Frod => write!(f, "FROD"),
            Method::FrodDat => write!(f, "FROD_DAT"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub total_epochs: usize,
    /// First adversarial epoch (FROD_DAT only). Defaults to 60% of the
    /// total. Phase 2 lasts `total_epochs - switch_epoch` epochs.
    pub switch_epoch: Option<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Blocks retrained, counted from the head side. Defaults: STD 4,
    /// FROD/FROD_DAT 1.
    pub retrain_blocks: Option<usize>,
    /// Defaults: STD freezes statistics, FROD/FROD_DAT update them.
    pub norm_policy: Option<NormPolicy>,
    /// Imitation term. Defaults: off for STD/FROD, on for FROD_DAT.
    pub imitation: Option<ImitationConfig>,
    /// Phase-2 crafting. `steps == 1` uses the random-start single-step
    /// recipe; larger values run PGD crafting (the full adversarial-training
    /// reference).
    pub phase2_attack: AttackConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Std,
            total_epochs: 20,
            switch_epoch: None,
            learning_rate: 0.02,
            momentum: SGD_MOMENTUM,
            weight_decay: WEIGHT_DECAY,
            batch_size: 8,
            retrain_blocks: None,
            norm_policy: None,
            imitation: None,
            phase2_attack: AttackConfig {
                eps: 8.0 / 255.0,
                step_size: 1.25 * 8.0 / 255.0,
                steps: 1,
                loss_mode: LossMode::Cls,
                random_start: true,
                seed: 0,
            },
            seed: 0,
        }
    }
}

/// Fully-resolved method settings after defaults are applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTrainConfig {
    pub method: Method,
    pub total_epochs: usize,
    pub switch_epoch: Option<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub retrain_blocks: usize,
    pub norm_policy: NormPolicy,
    pub imitation: Option<ImitationConfig>,
    pub phase2_attack: Option<AttackConfig>,
    pub seed: u64,
}

impl TrainConfig {
    /// Applies method defaults and validates cross-field consistency.
    pub fn resolve(&self) -> Result<ResolvedTrainConfig> {
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let retrain_blocks = self.retrain_blocks.unwrap_or(match self.method {
            Method::Std => NUM_BLOCKS,
            Method::Frod | Method::FrodDat => 1,
        });
        if retrain_blocks > NUM_BLOCKS {
            return Err(Error::Config(format!(
                "retrain_blocks {retrain_blocks} out of range 0..={NUM_BLOCKS}"
            )));
        }
        let norm_policy = self.norm_policy.unwrap_or(match self.method {
            Method::Std => NormPolicy::Freeze,
            Method::Frod | Method::FrodDat => NormPolicy::Update,
        });
        let (switch_epoch, imitation, phase2_attack) = match self.method {
            Method::Std | Method::Frod => {
                if self.switch_epoch.is_some() {
                    return Err(Error::Config(format!(
                        "switch_epoch only applies to FROD_DAT, not {}",
                        self.method
                    )));
                }
                if self.imitation.is_some() && self.method == Method::Std {
                    return Err(Error::Config(
                        "imitation loss is not part of the STD pipeline".into(),
                    ));
                }
                (None, self.imitation.clone(), None)
            }
            Method::FrodDat => {
                let t1 = self
                    .switch_epoch
                    .unwrap_or(((self.total_epochs as f64) * 0.6).round() as usize);
                if t1 == 0 || t1 >= self.total_epochs {
                    return Err(Error::Config(format!(
                        "switch_epoch {t1} must satisfy 0 < t1 < total_epochs ({})",
                        self.total_epochs
                    )));
                }
                self.phase2_attack.validate()?;
                let imitation = Some(self.imitation.clone().unwrap_or_default());
                (Some(t1), imitation, Some(self.phase2_attack.clone()))
            }
        };
        if let Some(imi) = &imitation {
            imi.validate()?;
        }
        Ok(ResolvedTrainConfig {
            method: self.method,
            total_epochs: self.total_epochs,
            switch_epoch,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            retrain_blocks,
            norm_policy,
            imitation,
            phase2_attack,
            seed: self.seed,
        })
    }
}

/// Forward/backward passes through the trained model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounter {
    pub n_forward: u64,
    pub n_backward: u64,
}

impl StepCounter {
    fn add(&mut self, fwd: u64, bwd: u64) {
        self.n_forward += fwd;
        self.n_backward += bwd;
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// 1 = clean objective, 2 = adversarial objective.
    pub phase: u8,
    pub mean_loss: LossBreakdown,
    pub steps: StepCounter,
    pub optimizer_steps: u64,
    pub learning_rate: f64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: ResolvedTrainConfig,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Mean (forward, backward) passes per optimizer step over the epochs
    /// selected by `phase` (None = all).
    pub fn passes_per_step(&self, phase: Option<u8>) -> (f64, f64) {
        let mut fwd = 0u64;
        let mut bwd = 0u64;
        let mut steps = 0u64;
        for e in &self.epochs {
            if phase.map_or(true, |p| e.phase == p) {
                fwd += e.steps.n_forward;
                bwd += e.steps.n_backward;
                steps += e.optimizer_steps;
            }
        }
        if steps == 0 {
            return (0.0, 0.0);
        }
        (fwd as f64 / steps as f64, bwd as f64 / steps as f64)
    }

    pub fn wall_clock_per_step(&self, phase: Option<u8>) -> f64 {
        let mut wall = 0.0;
        let mut steps = 0u64;
        for e in &self.epochs {
            if phase.map_or(true, |p| e.phase == p) {
                wall += e.wall_clock_secs;
                steps += e.optimizer_steps;
            }
        }
        if steps == 0 {
            return 0.0;
        }
        wall / steps as f64
    }
}

/// Per-step overhead of one run against a baseline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub extra_fwd_per_step: f64,
    pub extra_bkwd_per_step: f64,
    pub wall_clock_ratio: f64,
}

/// Compares per-optimizer-step cost of `candidate` against `baseline`. Both
/// logs must come from equally-sized datasets (same steps per epoch).
pub fn count_overhead(baseline: &TrainLog, candidate: &TrainLog) -> Result<OverheadReport> {
    let steps_per_epoch = |log: &TrainLog| -> Option<u64> {
        let total: u64 = log.epochs.iter().map(|e| e.optimizer_steps).sum();
        (total > 0 && !log.epochs.is_empty()).then(|| total / log.epochs.len() as u64)
    };
    let (a, b) = (steps_per_epoch(baseline), steps_per_epoch(candidate));
    match (a, b) {
        (Some(a), Some(b)) if a == b => {}
        _ => {
            return Err(Error::Config(format!(
                "overhead comparison needs equal steps per epoch, got {a:?} vs {b:?}"
            )))
        }
    }
    let (base_fwd, base_bwd) = baseline.passes_per_step(None);
    let (cand_fwd, cand_bwd) = candidate.passes_per_step(None);
    let base_wall = baseline.wall_clock_per_step(None);
    let cand_wall = candidate.wall_clock_per_step(None);
    Ok(OverheadReport {
        extra_fwd_per_step: cand_fwd - base_fwd,
        extra_bkwd_per_step: cand_bwd - base_bwd,
        wall_clock_ratio: if base_wall > 0.0 {
            cand_wall / base_wall
        } else {
            f64::NAN
        },
    })
}

fn mix_seed(seed: u64, salt: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(salt.wrapping_mul(0xD1B54A32D192ED03))
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x94D049BB133111EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Accuracy of the classifier on a crop dataset, optionally under attack.
pub fn classifier_accuracy(
    model: &mut ClassifierModel,
    dataset: &[ClsSample],
    attack: Option<&AttackConfig>,
    batch_size: usize,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Eval("empty classification dataset".into()));
    }
    let mut correct = 0usize;
    for (bi, chunk) in dataset.chunks(batch_size.max(1)).enumerate() {
        let images: Vec<&crate::data::ImageTensor> = chunk.iter().map(|s| &s.crop).collect();
        let batch = batch_images(&images)?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let eval_batch = match attack {
            Some(cfg) => {
                let batch_cfg = AttackConfig {
                    seed: cfg.seed.wrapping_add(bi as u64),
                    ..cfg.clone()
                };
                pgd_classifier(model, &batch, &labels, &batch_cfg)?.adv_images
            }
            None => batch,
        };
        let preds = model.predict(&eval_batch);
        correct += preds
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// The madry-style PGD used while adversarially pretraining the classifier.
pub fn pretrain_attack(eps: f64, steps: usize) -> AttackConfig {
    AttackConfig {
        eps,
        step_size: 2.5 * eps / steps as f64,
        steps,
        loss_mode: LossMode::Cls,
        random_start: true,
        seed: 0,
    }
}

/// Trains the shape classifier on crops, clean or with PGD adversarial
/// examples, and returns the model plus a serializable checkpoint.
pub fn pretrain_backbone(
    dataset: &[ClsSample],
    adversarial: bool,
    epochs: usize,
    eps: f64,
    widths: [usize; NUM_BLOCKS],
    seed: u64,
) -> Result<(ClassifierModel, Checkpoint)> {
    if dataset.is_empty() {
        return Err(Error::Config("empty pretraining dataset".into()));
    }
    let mut model = ClassifierModel::new(widths, crate::data::NUM_CLASSES, seed);
    model.norm = NormPolicy::Update;
    let batch_size = 32usize;
    let base_lr = 0.05;
    let attack_steps = 7;

    for epoch in 0..epochs {
        let lr = if epoch >= ((epochs as f64) * LR_DECAY_AT).floor() as usize {
            base_lr * LR_DECAY_FACTOR
        } else {
            base_lr
        };
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5803FF1e, epoch as u64));
        order.shuffle(&mut rng);

        for (bi, chunk) in order.chunks(batch_size).enumerate() {
            let images: Vec<&crate::data::ImageTensor> =
                chunk.iter().map(|&i| &dataset[i].crop).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset[i].label).collect();
            let batch = batch_images(&images)?;

            let train_batch = if adversarial {
                let cfg = AttackConfig {
                    seed: mix_seed(seed, 0xADC4AF7, (epoch * 100_000 + bi) as u64),
                    ..pretrain_attack(eps, attack_steps)
                };
                pgd_classifier(&mut model, &batch, &labels, &cfg)?.adv_images
            } else {
                batch
            };

            let logits = model.forward(&train_batch, ForwardMode::Train, true);
            let (_, d_logits) = crate::attack::cross_entropy_with_grad(&logits, &labels);
            model.zero_grads();
            model.backward(&d_logits, true, false);
            model.sgd_step(lr, SGD_MOMENTUM, WEIGHT_DECAY);
        }
    }

    let provenance = serde_json::json!({
        "task": "classification",
        "adversarial": adversarial,
        "epochs": epochs,
        "eps": eps,
        "seed": seed,
    });
    let ckpt = model.to_checkpoint(provenance);
    Ok((model, ckpt))
}

/// Trains a detector per the configured method. The backbone always
/// initializes from `backbone_ckpt`; which checkpoint to pass (standard or
/// robust) is the caller's method choice.
pub fn train(
    config: &TrainConfig,
    dataset: &[SceneSample],
    backbone_ckpt: &Checkpoint,
    detector_config: DetectorConfig,
) -> Result<(DetectorModel, TrainLog)> {
    let resolved = config.resolve()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty detection dataset".into()));
    }

    let detector_config = DetectorConfig {
        seed: mix_seed(resolved.seed, 0xDE7EC7, 0),
        ..detector_config
    };
    let mut model = DetectorModel::init_from_classifier(detector_config, backbone_ckpt)?;
    model.apply_freeze_policy(resolved.retrain_blocks)?;
    model.apply_norm_policy(resolved.norm_policy);

    // The imitation reference is cloned before any update, so it carries the
    // pristine pretrained backbone.
    let mut reference: Option<Backbone> = resolved
        .imitation
        .as_ref()
        .map(|_| model.clone_frozen_backbone());

    let mut log = TrainLog {
        config: resolved.clone(),
        epochs: Vec::with_capacity(resolved.total_epochs),
    };

    let decay_epoch = ((resolved.total_epochs as f64) * LR_DECAY_AT).floor() as usize;
    let mut global_step = 0u64;
    for epoch in 0..resolved.total_epochs {
        let phase = match resolved.switch_epoch {
            Some(t1) if epoch >= t1 => 2u8,
            _ => 1u8,
        };
        let lr = if epoch >= decay_epoch {
            resolved.learning_rate * LR_DECAY_FACTOR
        } else {
            resolved.learning_rate
        };

        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(resolved.seed, 0x5837FF, epoch as u64));
        order.shuffle(&mut rng);

        let started = Instant::now();
        let mut counter = StepCounter::default();
        let mut optimizer_steps = 0u64;
        let mut loss_sums = (0.0, 0.0, 0.0, 0.0); // cls, loc, imi, total

        for chunk in order.chunks(resolved.batch_size) {
            let images: Vec<&crate::data::ImageTensor> =
                chunk.iter().map(|&i| &dataset[i].image).collect();
            let gts: Vec<Vec<crate::geom::GroundTruth>> = chunk
                .iter()
                .map(|&i| dataset[i].annotations.clone())
                .collect();
            let batch = batch_images(&images)?;

            let (breakdown, grads, grid_hw) = if phase == 2 {
                let attack = resolved.phase2_attack.as_ref().expect("phase 2 has attack");
                let craft_seed = mix_seed(resolved.seed, 0xC4AF7, global_step);
                let adv = if attack.steps == 1 {
                    counter.add(1, 1);
                    fast_single_step_with_mode(
                        &mut model,
                        &batch,
                        &gts,
                        attack.eps,
                        craft_seed,
                        attack.loss_mode,
                    )?
                } else {
                    counter.add(attack.steps as u64, attack.steps as u64);
                    let cfg = AttackConfig {
                        seed: craft_seed,
                        ..attack.clone()
                    };
                    pgd(&mut model, &batch, &gts, &cfg)?
                };
                phase2_objective(
                    &mut model,
                    reference.as_mut(),
                    &batch,
                    &adv.adv_images,
                    attack.eps,
                    &gts,
                    resolved.imitation.as_ref(),
                    ForwardMode::Train,
                )?
            } else {
                phase1_objective(
                    &mut model,
                    reference.as_mut(),
                    &batch,
                    &gts,
                    resolved.imitation.as_ref(),
                    ForwardMode::Train,
                )?
            };
            counter.add(1, 0); // the training forward inside the objective

            model.zero_grads();
            model.backward(
                &grads.d_logits,
                &grads.d_deltas,
                &grads.d_block_features,
                grid_hw,
                true,
                false,
            );
            counter.add(0, 1);
            model.sgd_step(lr, resolved.momentum, resolved.weight_decay);

            optimizer_steps += 1;
            global_step += 1;
            loss_sums.0 += breakdown.cls;
            loss_sums.1 += breakdown.loc;
            loss_sums.2 += breakdown.imi;
            loss_sums.3 += breakdown.total;
        }

        let n = optimizer_steps.max(1) as f64;
        log.epochs.push(EpochRecord {
            epoch,
            phase,
            mean_loss: LossBreakdown {
                cls: loss_sums.0 / n,
                loc: loss_sums.1 / n,
                imi: loss_sums.2 / n,
                lambda: resolved.imitation.as_ref().map_or(0.0, |i| i.lambda),
                total: loss_sums.3 / n,
            },
            steps: counter,
            optimizer_steps,
            learning_rate: lr,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        });
    }

    Ok((model, log))
}
