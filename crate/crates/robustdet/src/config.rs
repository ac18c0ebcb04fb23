//! Declarative run configuration.
//!
//! One JSON document drives every command. All sections and fields are
//! optional with the defaults below; unknown keys anywhere are rejected with
//! the offending key path in the error. Commands echo the fully-resolved
//! config into their run directory so a run reproduces from its directory
//! alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::data::{CropConfig, SceneConfig};
use crate::eval::EvalConfig;
use crate::model::DetectorConfig;
use crate::train::TrainConfig;
use crate::viz::VizSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub scene: SceneConfig,
    pub crop: CropConfig,
    /// Split sizes. Evaluation scenes come from a disjoint index range.
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub train_crops: usize,
    pub eval_crops: usize,
    /// When set, commands load this dataset directory instead of generating.
    pub dir: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            scene: SceneConfig::default(),
            crop: CropConfig::default(),
            train_scenes: 128,
            eval_scenes: 48,
            train_crops: 1024,
            eval_crops: 512,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub epochs: usize,
    /// Budget for adversarial pretraining (PGD crafting per batch).
    pub eps: f64,
    pub seed: u64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            epochs: 8,
            eps: 8.0 / 255.0,
            seed: 0,
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub backbone: BackboneSection,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    /// Evaluation attack (the robust-mAP protocol).
    pub attack: AttackConfig,
    pub eval: EvalConfig,
    pub viz: VizSpec,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        // serde names the offending key and position for unknown fields.
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Serializes the fully-resolved config (defaults applied).
    pub fn echo(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let config = RunConfig::default();
        config.echo(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(config, loaded);
    }

    #[test]
    fn empty_document_is_all_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, "{}").unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded, RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected_with_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"train": {"learning_rte": 0.1}}"#).unwrap();
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("learning_rte"), "{err}");
    }

    #[test]
    fn partial_overrides_apply() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{"dataset": {"train_scenes": 16}, "train": {"total_epochs": 3}}"#,
        )
        .unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.dataset.train_scenes, 16);
        assert_eq!(loaded.train.total_epochs, 3);
        assert_eq!(loaded.dataset.eval_scenes, 48);
    }
}
