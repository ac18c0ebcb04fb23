//! Versioned binary checkpoints: a JSON metadata block followed by named
//! f64 tensors, everything little-endian and written in sorted name order so
//! identical states produce identical bytes.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierModel, DetectorConfig, DetectorModel, NUM_BLOCKS};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"RDCKPT01";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Classifier,
    Detector,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub kind: CheckpointKind,
    pub block_widths: [usize; NUM_BLOCKS],
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<DetectorConfig>,
    /// Free-form training provenance (method, seed, epochs).
    #[serde(default)]
    pub provenance: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    let meta = serde_json::to_vec(&ckpt.meta).map_err(|e| Error::json(path, e))?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, (shape, data)) in &ckpt.tensors {
        let expected: usize = shape.iter().product();
        assert_eq!(expected, data.len(), "tensor {name} shape/data mismatch");
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = std::io::Cursor::new(bytes);
    let bad = |reason: &str| Error::checkpoint(path, reason.to_string());

    let mut magic = [0u8; 8];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| bad("file too short for magic"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let read_u32 = |cursor: &mut std::io::Cursor<Vec<u8>>| -> Result<u32> {
        let mut b = [0u8; 4];
        cursor
            .read_exact(&mut b)
            .map_err(|_| Error::checkpoint(path, "truncated u32"))?;
        Ok(u32::from_le_bytes(b))
    };

    let meta_len = read_u32(&mut cursor)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    cursor
        .read_exact(&mut meta_bytes)
        .map_err(|_| bad("truncated metadata"))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&meta_bytes).map_err(|e| Error::json(path, e))?;
    if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(bad(&format!(
            "schema_version {} unsupported (expected {CHECKPOINT_SCHEMA_VERSION})",
            meta.schema_version
        )));
    }

    let count = read_u32(&mut cursor)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut cursor)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        cursor
            .read_exact(&mut name_bytes)
            .map_err(|_| bad("truncated tensor name"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| bad("tensor name not utf8"))?;
        let ndim = read_u32(&mut cursor)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            cursor
                .read_exact(&mut b)
                .map_err(|_| bad("truncated shape"))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0.0f64; len];
        for v in data.iter_mut() {
            let mut b = [0u8; 8];
            cursor
                .read_exact(&mut b)
                .map_err(|_| Error::checkpoint(path, format!("truncated data in tensor {name}")))?;
            *v = f64::from_le_bytes(b);
        }
        tensors.insert(name, (shape, data));
    }
    Ok(Checkpoint { meta, tensors })
}

impl DetectorModel {
    pub fn to_checkpoint(&self, provenance: serde_json::Value) -> Checkpoint {
        let mut tensors = self.backbone.tensor_map();
        for (prefix, conv) in [("heads.cls", &self.heads.cls), ("heads.reg", &self.heads.reg)] {
            tensors.insert(
                format!("{prefix}.weight"),
                (
                    conv.weight.value.shape().to_vec(),
                    conv.weight.value.iter().copied().collect(),
                ),
            );
            if let Some(b) = conv.bias.as_ref() {
                tensors.insert(
                    format!("{prefix}.bias"),
                    (vec![b.value.len()], b.value.to_vec()),
                );
            }
        }
        Checkpoint {
            meta: CheckpointMeta {
                schema_version: CHECKPOINT_SCHEMA_VERSION,
                kind: CheckpointKind::Detector,
                block_widths: self.config.widths,
                num_classes: self.config.num_classes,
                detector: Some(self.config.clone()),
                provenance,
            },
            tensors,
        }
    }

    /// Rebuilds a detector from a detector checkpoint, bit-exact.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.kind != CheckpointKind::Detector {
            return Err(Error::Config("checkpoint is not a detector".into()));
        }
        let config = ckpt
            .meta
            .detector
            .clone()
            .ok_or_else(|| Error::Config("detector checkpoint missing config".into()))?;
        let mut model = DetectorModel::new(config);
        model.backbone.load_tensor_map(&ckpt.tensors)?;
        let mut missing = Vec::new();
        for (prefix, conv) in [
            ("heads.cls", &mut model.heads.cls),
            ("heads.reg", &mut model.heads.reg),
        ] {
            match ckpt.tensors.get(&format!("{prefix}.weight")) {
                Some((shape, data)) if shape.as_slice() == conv.weight.value.shape() => {
                    conv.weight.value.as_slice_mut().unwrap().copy_from_slice(data);
                }
                Some((shape, _)) => {
                    return Err(Error::ShapeMismatch {
                        context: format!("{prefix}.weight"),
                        expected: format!("{:?}", conv.weight.value.shape()),
                        got: format!("{shape:?}"),
                    })
                }
                None => missing.push(format!("{prefix}.weight")),
            }
            if let Some(b) = conv.bias.as_mut() {
                match ckpt.tensors.get(&format!("{prefix}.bias")) {
                    Some((_, data)) if data.len() == b.value.len() => {
                        b.value.as_slice_mut().unwrap().copy_from_slice(data);
                    }
                    _ => missing.push(format!("{prefix}.bias")),
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint missing tensors: {}",
                missing.join(", ")
            )));
        }
        Ok(model)
    }

    /// Fresh detector whose backbone blocks come from a classifier
    /// checkpoint; heads are newly initialized from `config.seed`.
    pub fn init_from_classifier(config: DetectorConfig, classifier: &Checkpoint) -> Result<Self> {
        if classifier.meta.kind != CheckpointKind::Classifier {
            return Err(Error::Config(
                "backbone initialization needs a classifier checkpoint".into(),
            ));
        }
        let mut model = DetectorModel::new(config);
        model.backbone.load_tensor_map(&classifier.tensors)?;
        Ok(model)
    }
}

impl ClassifierModel {
    pub fn to_checkpoint(&self, provenance: serde_json::Value) -> Checkpoint {
        let mut tensors = self.backbone.tensor_map();
        tensors.insert(
            "fc.weight".to_string(),
            (
                self.fc.weight.value.shape().to_vec(),
                self.fc.weight.value.iter().copied().collect(),
            ),
        );
        tensors.insert(
            "fc.bias".to_string(),
            (vec![self.fc.bias.value.len()], self.fc.bias.value.to_vec()),
        );
        Checkpoint {
            meta: CheckpointMeta {
                schema_version: CHECKPOINT_SCHEMA_VERSION,
                kind: CheckpointKind::Classifier,
                block_widths: self.backbone.widths,
                num_classes: self.num_classes,
                detector: None,
                provenance,
            },
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.kind != CheckpointKind::Classifier {
            return Err(Error::Config("checkpoint is not a classifier".into()));
        }
        let mut model = ClassifierModel::new(ckpt.meta.block_widths, ckpt.meta.num_classes, 0);
        model.backbone.load_tensor_map(&ckpt.tensors)?;
        for (name, target) in [
            ("fc.weight", &mut model.fc.weight.value as &mut dyn AnySlice),
        ] {
            let (shape, data) = ckpt
                .tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint missing tensor {name}")))?;
            target.fill_from(shape, data, name)?;
        }
        let (shape, data) = ckpt
            .tensors
            .get("fc.bias")
            .ok_or_else(|| Error::Config("checkpoint missing tensor fc.bias".into()))?;
        if shape.as_slice() != model.fc.bias.value.shape() {
            return Err(Error::ShapeMismatch {
                context: "fc.bias".into(),
                expected: format!("{:?}", model.fc.bias.value.shape()),
                got: format!("{shape:?}"),
            });
        }
        model.fc.bias.value.as_slice_mut().unwrap().copy_from_slice(data);
        Ok(model)
    }
}

/// Helper for filling differently-shaped ndarray params from checkpoint data.
trait AnySlice {
    fn fill_from(&mut self, shape: &[usize], data: &[f64], name: &str) -> Result<()>;
}

impl<D: ndarray::Dimension> AnySlice for ndarray::Array<f64, D> {
    fn fill_from(&mut self, shape: &[usize], data: &[f64], name: &str) -> Result<()> {
        if shape != self.shape() {
            return Err(Error::ShapeMismatch {
                context: name.to_string(),
                expected: format!("{:?}", self.shape()),
                got: format!("{shape:?}"),
            });
        }
        self.as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(data);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{DetectorConfig, ForwardMode};
    use super::*;
    use crate::nn::Tensor4;

    #[test]
    fn detector_checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.ckpt");
        let mut model = DetectorModel::new(DetectorConfig {
            widths: [4, 4, 8, 8],
            seed: 21,
            ..DetectorConfig::default()
        });
        // Move stats off their init values so the roundtrip covers them.
        let x = Tensor4::from_shape_fn((2, 3, 64, 64), |(n, c, y, xx)| {
            ((n + c + y + xx) as f64 * 0.01).sin().abs()
        });
        model.apply_norm_policy(super::super::NormPolicy::Update);
        model.forward(&x, ForwardMode::Train, false);

        save_checkpoint(&model.to_checkpoint(serde_json::json!({"note": "test"})), &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let restored = DetectorModel::from_checkpoint(&loaded).unwrap();
        assert_eq!(model.weights_checksum(), restored.weights_checksum());
        assert_eq!(
            model.backbone.stats_checksum(),
            restored.backbone.stats_checksum()
        );

        // Same state saved twice gives identical bytes.
        let path2 = dir.path().join("det2.ckpt");
        save_checkpoint(&model.to_checkpoint(serde_json::json!({"note": "test"})), &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn classifier_to_detector_backbone_transfer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cls.ckpt");
        let mut cls = ClassifierModel::new([4, 4, 8, 8], 3, 5);
        let x = Tensor4::from_shape_fn((2, 3, 32, 32), |(n, c, y, xx)| {
            ((n * 3 + c + y + xx) as f64 * 0.02).cos().abs()
        });
        cls.forward(&x, ForwardMode::Train, false);
        save_checkpoint(&cls.to_checkpoint(serde_json::Value::Null), &path).unwrap();

        let ckpt = load_checkpoint(&path).unwrap();
        let config = DetectorConfig {
            widths: [4, 4, 8, 8],
            seed: 77,
            ..DetectorConfig::default()
        };
        let mut det = DetectorModel::init_from_classifier(config, &ckpt).unwrap();

        // Shared backbone must produce identical block features.
        let mut clsf = ClassifierModel::from_checkpoint(&ckpt).unwrap();
        let feats_det = det.forward(&x, ForwardMode::Eval, false).block_features;
        let feats_cls = clsf
            .backbone
            .forward(&x, crate::nn::BnMode::Frozen, false);
        for (a, b) in feats_det.iter().zip(&feats_cls) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn wrong_widths_name_the_block() {
        let cls = ClassifierModel::new([4, 4, 8, 8], 3, 5);
        let ckpt = cls.to_checkpoint(serde_json::Value::Null);
        let config = DetectorConfig {
            widths: [4, 8, 8, 8],
            ..DetectorConfig::default()
        };
        let err = DetectorModel::init_from_classifier(config, &ckpt).unwrap_err();
        assert!(err.to_string().contains("block1"), "{err}");
    }

    #[test]
    fn kind_mismatch_rejected() {
        let model = DetectorModel::new(DetectorConfig {
            widths: [4, 4, 8, 8],
            ..DetectorConfig::default()
        });
        let ckpt = model.to_checkpoint(serde_json::Value::Null);
        assert!(ClassifierModel::from_checkpoint(&ckpt).is_err());
        assert!(DetectorModel::init_from_classifier(DetectorConfig::default(), &ckpt).is_err());
    }
}
