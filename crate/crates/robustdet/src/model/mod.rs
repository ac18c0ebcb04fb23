//! Detector and classifier models built on the shared backbone.

mod backbone;
mod checkpoint;
mod heads;

pub use backbone::{Backbone, Block, FreezePolicy, NormPolicy, NUM_BLOCKS};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind};
pub use heads::{DetectorHeads, CLS_SCORE_PRIOR};

use ndarray::Array3;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::geom::{build_anchors, decode_deltas, nms, AnchorConfig, Detection};
use crate::nn::{global_avg_pool, global_avg_pool_backward, BnMode, Linear, Tensor4};
use crate::{par, Error, Result};

/// Keep at most this many detections per image after suppression.
pub const MAX_DETECTIONS_PER_IMAGE: usize = 100;
/// Score-ranked candidate cap before suppression.
const PRE_NMS_TOP_K: usize = 400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub widths: [usize; NUM_BLOCKS],
    pub num_classes: usize,
    pub anchor: AnchorConfig,
    /// Weight-initialization seed.
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            widths: [16, 32, 64, 64],
            num_classes: crate::data::NUM_CLASSES,
            anchor: AnchorConfig::default(),
            seed: 0,
        }
    }
}

/// How a forward pass treats normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Training pass: batch statistics (and running-stat updates) when the
    /// norm policy allows.
    Train,
    /// Training-time math without mutating running statistics. Used by
    /// gradient checks that must keep the loss a pure function.
    TrainNoStatUpdate,
    /// Inference: stored statistics, no mutation.
    Eval,
}

impl ForwardMode {
    fn bn_mode(self, norm: NormPolicy) -> BnMode {
        match (self, norm) {
            (ForwardMode::Train, NormPolicy::Update) => BnMode::Batch {
                update_running: true,
            },
            (ForwardMode::TrainNoStatUpdate, NormPolicy::Update) => BnMode::Batch {
                update_running: false,
            },
            _ => BnMode::Frozen,
        }
    }
}

/// Raw detector outputs plus the per-block features the imitation loss
/// consumes.
#[derive(Debug, Clone)]
pub struct DetectorOutput {
    /// `(n, anchors, classes)`.
    pub class_logits: Array3<f64>,
    /// `(n, anchors, 4)`.
    pub box_deltas: Array3<f64>,
    pub block_features: Vec<Tensor4>,
    pub grid_hw: (usize, usize),
}

/// Single-level anchor detector: four-block backbone plus two conv heads.
#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub backbone: Backbone,
    pub heads: DetectorHeads,
    pub config: DetectorConfig,
    pub freeze: FreezePolicy,
    pub norm: NormPolicy,
}

impl DetectorModel {
    pub fn new(config: DetectorConfig) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = Backbone::new(config.widths, &mut rng);
        let heads = DetectorHeads::new(
            config.widths[NUM_BLOCKS - 1],
            config.anchor.anchors_per_cell(),
            config.num_classes,
            &mut rng,
        );
        DetectorModel {
            backbone,
            heads,
            config,
            freeze: FreezePolicy { retrain_blocks: NUM_BLOCKS },
            norm: NormPolicy::Freeze,
        }
    }

    pub fn apply_freeze_policy(&mut self, retrain_blocks: usize) -> Result<()> {
        self.freeze = FreezePolicy::new(retrain_blocks)?;
        Ok(())
    }

    pub fn apply_norm_policy(&mut self, policy: NormPolicy) {
        self.norm = policy;
    }

    /// Forward pass over a batch of `[0,1]` images.
    pub fn forward(&mut self, images: &Tensor4, mode: ForwardMode, cache: bool) -> DetectorOutput {
        let bn = mode.bn_mode(self.norm);
        let block_features = self.backbone.forward(images, bn, cache);
        let last = &block_features[NUM_BLOCKS - 1];
        let (_, _, gh, gw) = last.dim();
        let (class_logits, box_deltas) = self.heads.forward(last, cache);
        DetectorOutput {
            class_logits,
            box_deltas,
            block_features,
            grid_hw: (gh, gw),
        }
    }

    /// Backward from output gradients (plus optional per-block feature
    /// gradients) to parameters and, when `input_grad`, the image gradient.
    pub fn backward(
        &mut self,
        d_logits: &Array3<f64>,
        d_deltas: &Array3<f64>,
        d_block_features: &[Option<Tensor4>; NUM_BLOCKS],
        grid_hw: (usize, usize),
        param_grads: bool,
        input_grad: bool,
    ) -> Option<Tensor4> {
        let d_last = self
            .heads
            .backward(d_logits, d_deltas, grid_hw, param_grads);
        self.backbone
            .backward(d_last, d_block_features, self.freeze, param_grads, input_grad)
    }

    /// Full decode pipeline: sigmoid scores over `score_thr`, delta decode,
    /// clip to image, per-class NMS, top-k cap.
    pub fn detect(
        &mut self,
        images: &Tensor4,
        score_thr: f64,
        nms_thr: f64,
    ) -> Result<Vec<Vec<Detection>>> {
        let (n, _, h, w) = images.dim();
        let output = self.forward(images, ForwardMode::Eval, false);
        let grid = build_anchors((h, w), &self.config.anchor)?;
        Ok(par::map_indexed(n, |i| {
            decode_detections(&output, &grid.anchors, i, (h, w), score_thr, nms_thr)
        }))
    }

    /// Deep detached copy of the backbone, caches cleared. The copy serves
    /// as the fixed imitation reference and is only ever run in frozen mode.
    pub fn clone_frozen_backbone(&self) -> Backbone {
        let mut clone = self.backbone.clone();
        clone.clear_caches();
        clone
    }

    pub fn zero_grads(&mut self) {
        self.backbone.zero_grads();
        for conv in [&mut self.heads.cls, &mut self.heads.reg] {
            conv.weight.zero_grad();
            if let Some(b) = conv.bias.as_mut() {
                b.zero_grad();
            }
        }
    }

    /// SGD update honoring the freeze policy; heads always train.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        self.backbone.sgd_step(self.freeze, lr, momentum, weight_decay);
        for conv in [&mut self.heads.cls, &mut self.heads.reg] {
            conv.weight.sgd_step(lr, momentum, weight_decay);
            if let Some(b) = conv.bias.as_mut() {
                b.sgd_step(lr, momentum, weight_decay);
            }
        }
    }

    /// fnv-1a over every parameter (backbone + heads), statistics excluded.
    pub fn weights_checksum(&self) -> u64 {
        let mut h = backbone::Fnv::new();
        for c in self.backbone.param_checksums() {
            let as_f64 = f64::from_bits(c);
            h.absorb(std::iter::once(&as_f64));
        }
        for conv in [&self.heads.cls, &self.heads.reg] {
            h.absorb(conv.weight.value.iter());
            if let Some(b) = conv.bias.as_ref() {
                h.absorb(b.value.iter());
            }
        }
        h.0
    }

    pub fn head_grad_norm(&self) -> f64 {
        let mut acc = 0.0;
        for conv in [&self.heads.cls, &self.heads.reg] {
            acc += conv.weight.grad.iter().map(|g| g * g).sum::<f64>();
            if let Some(b) = conv.bias.as_ref() {
                acc += b.grad.iter().map(|g| g * g).sum::<f64>();
            }
        }
        acc.sqrt()
    }
}

fn decode_detections(
    output: &DetectorOutput,
    anchors: &[crate::geom::BBox],
    image_index: usize,
    image_hw: (usize, usize),
    score_thr: f64,
    nms_thr: f64,
) -> Vec<Detection> {
    let (h, w) = image_hw;
    let num_classes = output.class_logits.dim().2;
    let mut candidates: Vec<Detection> = Vec::new();
    for (ai, anchor) in anchors.iter().enumerate() {
        let deltas = [
            output.box_deltas[[image_index, ai, 0]],
            output.box_deltas[[image_index, ai, 1]],
            output.box_deltas[[image_index, ai, 2]],
            output.box_deltas[[image_index, ai, 3]],
        ];
        let mut decoded: Option<crate::geom::BBox> = None;
        for c in 0..num_classes {
            let z = output.class_logits[[image_index, ai, c]];
            let score = 1.0 / (1.0 + (-z).exp());
            if score <= score_thr {
                continue;
            }
            if decoded.is_none() {
                decoded = decode_deltas(anchor, &deltas).clip(w as f64, h as f64);
                if decoded.is_none() {
                    break; // decoded box entirely outside the image
                }
            }
            candidates.push(Detection {
                bbox: decoded.unwrap(),
                class_id: c,
                score,
            });
        }
    }
    candidates.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
    candidates.truncate(PRE_NMS_TOP_K);
    let mut kept = nms(&candidates, nms_thr);
    kept.truncate(MAX_DETECTIONS_PER_IMAGE);
    kept
}

/// Shape classifier: the same backbone topped with average pooling and one
/// linear layer.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub backbone: Backbone,
    pub fc: Linear,
    pub num_classes: usize,
    pub norm: NormPolicy,
    pooled_hw: Option<(usize, usize)>,
}

impl ClassifierModel {
    pub fn new(widths: [usize; NUM_BLOCKS], num_classes: usize, seed: u64) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(widths, &mut rng);
        let fc = Linear::new(widths[NUM_BLOCKS - 1], num_classes, &mut rng);
        ClassifierModel {
            backbone,
            fc,
            num_classes,
            norm: NormPolicy::Update,
            pooled_hw: None,
        }
    }

    /// Returns `(n, classes)` logits.
    pub fn forward(&mut self, images: &Tensor4, mode: ForwardMode, cache: bool) -> ndarray::Array2<f64> {
        let bn = mode.bn_mode(self.norm);
        let features = self.backbone.forward(images, bn, cache);
        let last = &features[NUM_BLOCKS - 1];
        let (_, _, h, w) = last.dim();
        if cache {
            self.pooled_hw = Some((h, w));
        }
        let pooled = global_avg_pool(last);
        self.fc.forward(&pooled, cache)
    }

    pub fn backward(
        &mut self,
        d_logits: &ndarray::Array2<f64>,
        param_grads: bool,
        input_grad: bool,
    ) -> Option<Tensor4> {
        let (h, w) = self.pooled_hw.expect("classifier backward without forward");
        let d_pooled = self.fc.backward(d_logits, param_grads);
        let d_last = global_avg_pool_backward(&d_pooled, h, w);
        self.backbone.backward(
            d_last,
            &Default::default(),
            FreezePolicy {
                retrain_blocks: NUM_BLOCKS,
            },
            param_grads,
            input_grad,
        )
    }

    pub fn zero_grads(&mut self) {
        self.backbone.zero_grads();
        self.fc.weight.zero_grad();
        self.fc.bias.zero_grad();
    }

    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        self.backbone.sgd_step(
            FreezePolicy {
                retrain_blocks: NUM_BLOCKS,
            },
            lr,
            momentum,
            weight_decay,
        );
        self.fc.weight.sgd_step(lr, momentum, weight_decay);
        self.fc.bias.sgd_step(lr, momentum, weight_decay);
    }

    /// Hard predictions by argmax over logits.
    pub fn predict(&mut self, images: &Tensor4) -> Vec<usize> {
        let logits = self.forward(images, ForwardMode::Eval, false);
        logits
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }
}

/// Stacks per-sample images into a batch tensor.
pub fn batch_images(images: &[&crate::data::ImageTensor]) -> Result<Tensor4> {
    if images.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let (c, h, w) = images[0].dim();
    let mut out = Tensor4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(Error::ShapeMismatch {
                context: format!("batch image {i}"),
                expected: format!("{:?}", (c, h, w)),
                got: format!("{:?}", img.dim()),
            });
        }
        out.index_axis_mut(ndarray::Axis(0), i).assign(img);
    }
    Ok(out)
}
