//! Sweeps over one training axis with everything else held fixed.
//!
//! Each grid point is a full train-plus-eval run persisted into its own
//! subdirectory, so an interrupted sweep resumes by skipping completed
//! points. A `status.json` marks the table incomplete until the last point
//! lands, and `ablation.csv` merges the finished rows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train, Method, ResolvedTrainConfig, TrainConfig};
use crate::attack::{AttackConfig, LossMode};
use crate::data::SceneSample;
use crate::eval::{eval_clean, eval_robust, EvalConfig};
use crate::loss::ImitationConfig;
use crate::model::{Checkpoint, DetectorConfig, NormPolicy};
use crate::{Error, Result};

/// The sweepable axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Retrained blocks k = 0..=4 on the FROD pipeline.
    Blocks,
    /// Normalization statistics updated vs frozen on the FROD pipeline.
    Norm,
    /// Imitation weight in {0.1, 0.5, 1.0} on FROD_DAT.
    Lambda,
    /// Adversarial switch point in {10%, 60%, 95%} of the epochs on FROD_DAT.
    SwitchEpoch,
    /// Phase-2 crafting loss in {cls, reg, cls+reg} on FROD_DAT.
    AttackLoss,
}

impl AblationAxis {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "blocks" => Ok(AblationAxis::Blocks),
            "norm" => Ok(AblationAxis::Norm),
            "lambda" => Ok(AblationAxis::Lambda),
            "switch" | "switch_epoch" => Ok(AblationAxis::SwitchEpoch),
            "attack_loss" | "loss" => Ok(AblationAxis::AttackLoss),
            other => Err(Error::Config(format!(
                "unknown ablation axis {other:?} (expected blocks|norm|lambda|switch|attack_loss)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Blocks => "blocks",
            AblationAxis::Norm => "norm",
            AblationAxis::Lambda => "lambda",
            AblationAxis::SwitchEpoch => "switch",
            AblationAxis::AttackLoss => "attack_loss",
        }
    }
}

/// One finished grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub clean_map_50: f64,
    pub clean_map_50_95: f64,
    pub robust_map_50: f64,
    pub robust_map_50_95: f64,
    pub config: ResolvedTrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct SweepStatus {
    total: usize,
    completed: usize,
    complete: bool,
}

/// Builds the grid for an axis on top of `base`. The same seed is used at
/// every point.
fn grid(axis: AblationAxis, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    match axis {
        AblationAxis::Blocks => (0..=crate::model::NUM_BLOCKS)
            .map(|k| {
                (
                    format!("k{k}"),
                    TrainConfig {
                        method: Method::Frod,
                        retrain_blocks: Some(k),
                        switch_epoch: None,
                        imitation: None,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        AblationAxis::Norm => [NormPolicy::Update, NormPolicy::Freeze]
            .into_iter()
            .map(|policy| {
                (
                    format!("{policy:?}").to_lowercase(),
                    TrainConfig {
                        method: Method::Frod,
                        norm_policy: Some(policy),
                        switch_epoch: None,
                        imitation: None,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        AblationAxis::Lambda => [0.1, 0.5, 1.0]
            .into_iter()
            .map(|lambda| {
                (
                    format!("l{lambda}"),
                    TrainConfig {
                        method: Method::FrodDat,
                        imitation: Some(ImitationConfig {
                            lambda,
                            ..base.imitation.clone().unwrap_or_default()
                        }),
                        ..base.clone()
                    },
                )
            })
            .collect(),
        AblationAxis::SwitchEpoch => [0.10, 0.60, 0.95]
            .into_iter()
            .map(|frac| {
                let t1 = (((base.total_epochs as f64) * frac).round() as usize)
                    .clamp(1, base.total_epochs.saturating_sub(1));
                (
                    format!("t{}", (frac * 100.0) as usize),
                    TrainConfig {
                        method: Method::FrodDat,
                        switch_epoch: Some(t1),
                        ..base.clone()
                    },
                )
            })
            .collect(),
        AblationAxis::AttackLoss => [LossMode::Cls, LossMode::Reg, LossMode::ClsReg]
            .into_iter()
            .map(|mode| {
                (
                    mode.to_string().replace('+', "_"),
                    TrainConfig {
                        method: Method::FrodDat,
                        phase2_attack: AttackConfig {
                            loss_mode: mode,
                            ..base.phase2_attack.clone()
                        },
                        ..base.clone()
                    },
                )
            })
            .collect(),
    }
}

/// Runs the sweep. Completed points (their `row.json` already on disk) are
/// loaded instead of recomputed.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    axis: AblationAxis,
    base: &TrainConfig,
    train_data: &[SceneSample],
    eval_data: &[SceneSample],
    backbone: &Checkpoint,
    detector_config: &DetectorConfig,
    eval_attack: &AttackConfig,
    eval_cfg: &EvalConfig,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let points = grid(axis, base);
    let mut rows = Vec::with_capacity(points.len());

    let write_status = |completed: usize, complete: bool| -> Result<()> {
        let status = SweepStatus {
            total: points.len(),
            completed,
            complete,
        };
        let path = out_dir.join("status.json");
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&status).map_err(|e| Error::json(&path, e))?,
        )
        .map_err(|e| Error::io(&path, e))
    };
    write_status(0, false)?;

    for (i, (value, config)) in points.iter().enumerate() {
        let point_dir = out_dir.join(format!("{}_{}", axis.name(), value));
        let row_path = point_dir.join("row.json");
        let row: AblationRow = if row_path.exists() {
            let text = std::fs::read_to_string(&row_path).map_err(|e| Error::io(&row_path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(&row_path, e))?
        } else {
            let (mut model, log) = train(config, train_data, backbone, detector_config.clone())?;
            let (clean_map_50, clean_map_50_95) = eval_clean(&mut model, eval_data, eval_cfg)?;
            let (robust_map_50, robust_map_50_95) =
                eval_robust(&mut model, eval_data, eval_attack, eval_cfg)?;
            let row = AblationRow {
                axis: axis.name().to_string(),
                value: value.clone(),
                clean_map_50,
                clean_map_50_95,
                robust_map_50,
                robust_map_50_95,
                config: log.config.clone(),
            };
            std::fs::create_dir_all(&point_dir).map_err(|e| Error::io(&point_dir, e))?;
            std::fs::write(
                &row_path,
                serde_json::to_string_pretty(&row).map_err(|e| Error::json(&row_path, e))?,
            )
            .map_err(|e| Error::io(&row_path, e))?;
            row
        };
        rows.push(row);
        write_status(i + 1, false)?;
    }

    // Merged table.
    let mut csv = String::from(
        "axis,value,clean_map_50,clean_map_50_95,robust_map_50,robust_map_50_95\n",
    );
    for row in &rows {
        use std::fmt::Write as _;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            row.axis,
            row.value,
            row.clean_map_50,
            row.clean_map_50_95,
            row.robust_map_50,
            row.robust_map_50_95
        );
    }
    let csv_path = out_dir.join("ablation.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    write_status(rows.len(), true)?;
    Ok(rows)
}
