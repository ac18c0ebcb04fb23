//! The four-block convolutional backbone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{relu, relu_backward, BatchNorm2d, BnMode, Conv2d, Tensor4};

pub const NUM_BLOCKS: usize = 4;

/// Whether training updates normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormPolicy {
    /// Training forwards use batch statistics and fold them into the running
    /// estimates.
    Update,
    /// Normalization always uses the stored running statistics, which never
    /// change.
    Freeze,
}

/// How many blocks, counted from the head side, receive gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub retrain_blocks: usize,
}

impl FreezePolicy {
    pub fn new(retrain_blocks: usize) -> crate::Result<Self> {
        if retrain_blocks > NUM_BLOCKS {
            return Err(crate::Error::Config(format!(
                "retrain_blocks {retrain_blocks} out of range 0..={NUM_BLOCKS}"
            )));
        }
        Ok(FreezePolicy { retrain_blocks })
    }

    /// True when block `index` (0-based from the input side) is trainable.
    pub fn trainable(&self, index: usize) -> bool {
        index >= NUM_BLOCKS - self.retrain_blocks
    }

    /// Index of the shallowest trainable block, or NUM_BLOCKS when none is.
    pub fn first_trainable(&self) -> usize {
        NUM_BLOCKS - self.retrain_blocks
    }
}

/// Two conv+norm+relu stages; the first conv downsamples by 2.
#[derive(Debug, Clone)]
pub struct Block {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    act1: Option<Tensor4>,
    act2: Option<Tensor4>,
}

impl Block {
    fn new(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Block {
            conv1: Conv2d::new(c_in, c_out, 3, 2, false, rng),
            bn1: BatchNorm2d::new(c_out),
            conv2: Conv2d::new(c_out, c_out, 3, 1, false, rng),
            bn2: BatchNorm2d::new(c_out),
            act1: None,
            act2: None,
        }
    }

    fn forward(&mut self, x: &Tensor4, mode: BnMode, cache: bool) -> Tensor4 {
        let h = self.conv1.forward(x, cache);
        let h = self.bn1.forward(&h, mode, cache);
        let a1 = relu(&h);
        let h = self.conv2.forward(&a1, cache);
        let h = self.bn2.forward(&h, mode, cache);
        let a2 = relu(&h);
        if cache {
            self.act1 = Some(a1);
            self.act2 = Some(a2.clone());
        }
        a2
    }

    fn backward(&mut self, dout: &Tensor4, param_grads: bool) -> Tensor4 {
        let a2 = self.act2.as_ref().expect("block backward without forward");
        let d = relu_backward(dout, a2);
        let d = self.bn2.backward(&d, param_grads);
        let d = self.conv2.backward(&d, param_grads);
        let a1 = self.act1.as_ref().expect("block backward without forward");
        let d = relu_backward(&d, a1);
        let d = self.bn1.backward(&d, param_grads);
        self.conv1.backward(&d, param_grads)
    }

    fn clear_cache(&mut self) {
        self.conv1.clear_cache();
        self.bn1.clear_cache();
        self.conv2.clear_cache();
        self.bn2.clear_cache();
        self.act1 = None;
        self.act2 = None;
    }
}

/// The feature extractor: four [`Block`]s with strides 2/4/8/16 and the
/// configured channel widths.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub blocks: Vec<Block>,
    pub widths: [usize; NUM_BLOCKS],
}

impl Backbone {
    pub fn new(widths: [usize; NUM_BLOCKS], rng: &mut impl Rng) -> Self {
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut c_in = 3;
        for &w in &widths {
            blocks.push(Block::new(c_in, w, rng));
            c_in = w;
        }
        Backbone { blocks, widths }
    }

    /// Total spatial downscale factor of the last block.
    pub fn stride(&self) -> usize {
        1 << NUM_BLOCKS
    }

    /// Runs all blocks, returning every block's output feature map.
    pub fn forward(&mut self, x: &Tensor4, mode: BnMode, cache: bool) -> Vec<Tensor4> {
        let mut features = Vec::with_capacity(NUM_BLOCKS);
        let mut h = x.clone();
        for block in &mut self.blocks {
            h = block.forward(&h, mode, cache);
            features.push(h.clone());
        }
        features
    }

    /// Backward through the blocks.
    ///
    /// `d_features[i]`, when present, is an extra gradient on block `i`'s
    /// output (the imitation loss injects these). Parameter gradients
    /// accumulate only for blocks where `param_grads` and the freeze policy
    /// allow it. Propagation stops at the shallowest block that still needs
    /// it unless `input_grad` demands the full path; attacks set
    /// `input_grad` and take the returned image gradient.
    pub fn backward(
        &mut self,
        d_last: Tensor4,
        d_features: &[Option<Tensor4>; NUM_BLOCKS],
        freeze: FreezePolicy,
        param_grads: bool,
        input_grad: bool,
    ) -> Option<Tensor4> {
        let stop = if input_grad {
            0
        } else {
            freeze.first_trainable().min(NUM_BLOCKS)
        };
        let mut d = d_last;
        for i in (0..NUM_BLOCKS).rev() {
            if let Some(extra) = &d_features[i] {
                d += extra;
            }
            if i < stop {
                return None;
            }
            let wants_params = param_grads && freeze.trainable(i);
            if i == 0 && !input_grad && !wants_params {
                return None;
            }
            d = self.blocks[i].backward(&d, wants_params);
        }
        input_grad.then_some(d)
    }

    pub fn clear_caches(&mut self) {
        for b in &mut self.blocks {
            b.clear_cache();
        }
    }

    /// Named parameter and statistic tensors, keyed for checkpoints.
    pub fn tensor_map(&self) -> std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        let mut map = std::collections::BTreeMap::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |name: &str| format!("backbone.block{i}.{name}");
            map.insert(
                p("conv1.weight"),
                (
                    b.conv1.weight.value.shape().to_vec(),
                    b.conv1.weight.value.iter().copied().collect(),
                ),
            );
            map.insert(
                p("conv2.weight"),
                (
                    b.conv2.weight.value.shape().to_vec(),
                    b.conv2.weight.value.iter().copied().collect(),
                ),
            );
            for (bn_name, bn) in [("bn1", &b.bn1), ("bn2", &b.bn2)] {
                map.insert(
                    p(&format!("{bn_name}.gamma")),
                    (vec![bn.channels()], bn.gamma.value.to_vec()),
                );
                map.insert(
                    p(&format!("{bn_name}.beta")),
                    (vec![bn.channels()], bn.beta.value.to_vec()),
                );
                map.insert(
                    p(&format!("{bn_name}.running_mean")),
                    (vec![bn.channels()], bn.running_mean.to_vec()),
                );
                map.insert(
                    p(&format!("{bn_name}.running_var")),
                    (vec![bn.channels()], bn.running_var.to_vec()),
                );
            }
        }
        map
    }

    /// Installs tensors from a checkpoint map; errors name the first
    /// mismatching tensor.
    pub fn load_tensor_map(
        &mut self,
        map: &std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    ) -> crate::Result<()> {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let fetch = |name: String| -> crate::Result<&(Vec<usize>, Vec<f64>)> {
                map.get(&name).ok_or_else(|| crate::Error::ShapeMismatch {
                    context: name.clone(),
                    expected: "tensor present".into(),
                    got: "missing".into(),
                })
            };
            let assign2 =
                |target: &mut crate::nn::Param<ndarray::Ix2>, name: String| -> crate::Result<()> {
                    let (shape, data) = fetch(name.clone())?;
                    if shape.as_slice() != target.value.shape() {
                        return Err(crate::Error::ShapeMismatch {
                            context: name,
                            expected: format!("{:?}", target.value.shape()),
                            got: format!("{shape:?}"),
                        });
                    }
                    target.value.as_slice_mut().unwrap().copy_from_slice(data);
                    Ok(())
                };
            assign2(&mut b.conv1.weight, format!("backbone.block{i}.conv1.weight"))?;
            assign2(&mut b.conv2.weight, format!("backbone.block{i}.conv2.weight"))?;
            for (bn_name, bn) in [("bn1", &mut b.bn1), ("bn2", &mut b.bn2)] {
                let c = bn.channels();
                let assign1 = |target: &mut [f64], field: &str| -> crate::Result<()> {
                    let name = format!("backbone.block{i}.{bn_name}.{field}");
                    let (shape, data) = fetch(name.clone())?;
                    if shape.as_slice() != [c] {
                        return Err(crate::Error::ShapeMismatch {
                            context: name,
                            expected: format!("[{c}]"),
                            got: format!("{shape:?}"),
                        });
                    }
                    target.copy_from_slice(data);
                    Ok(())
                };
                assign1(bn.gamma.value.as_slice_mut().unwrap(), "gamma")?;
                assign1(bn.beta.value.as_slice_mut().unwrap(), "beta")?;
                assign1(bn.running_mean.as_slice_mut().unwrap(), "running_mean")?;
                assign1(bn.running_var.as_slice_mut().unwrap(), "running_var")?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for b in &mut self.blocks {
            b.conv1.weight.zero_grad();
            b.conv2.weight.zero_grad();
            for bn in [&mut b.bn1, &mut b.bn2] {
                bn.gamma.zero_grad();
                bn.beta.zero_grad();
            }
        }
    }

    /// SGD update on trainable blocks only; frozen blocks stay bit-identical.
    pub fn sgd_step(&mut self, freeze: FreezePolicy, lr: f64, momentum: f64, weight_decay: f64) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if !freeze.trainable(i) {
                continue;
            }
            b.conv1.weight.sgd_step(lr, momentum, weight_decay);
            b.conv2.weight.sgd_step(lr, momentum, weight_decay);
            for bn in [&mut b.bn1, &mut b.bn2] {
                bn.gamma.sgd_step(lr, momentum, weight_decay);
                bn.beta.sgd_step(lr, momentum, weight_decay);
            }
        }
    }

    /// Sum of squared parameter gradients per block.
    pub fn grad_norms(&self) -> [f64; NUM_BLOCKS] {
        let mut out = [0.0; NUM_BLOCKS];
        for (i, b) in self.blocks.iter().enumerate() {
            let mut acc = 0.0;
            acc += b.conv1.weight.grad.iter().map(|g| g * g).sum::<f64>();
            acc += b.conv2.weight.grad.iter().map(|g| g * g).sum::<f64>();
            for bn in [&b.bn1, &b.bn2] {
                acc += bn.gamma.grad.iter().map(|g| g * g).sum::<f64>();
                acc += bn.beta.grad.iter().map(|g| g * g).sum::<f64>();
            }
            out[i] = acc.sqrt();
        }
        out
    }

    /// fnv-1a over each block's parameter bytes (affine included, statistics
    /// excluded).
    pub fn param_checksums(&self) -> [u64; NUM_BLOCKS] {
        let mut out = [0u64; NUM_BLOCKS];
        for (i, b) in self.blocks.iter().enumerate() {
            let mut h = Fnv::new();
            h.absorb(b.conv1.weight.value.iter());
            h.absorb(b.conv2.weight.value.iter());
            for bn in [&b.bn1, &b.bn2] {
                h.absorb(bn.gamma.value.iter());
                h.absorb(bn.beta.value.iter());
            }
            out[i] = h.0;
        }
        out
    }

    /// fnv-1a over all running statistics.
    pub fn stats_checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for b in &self.blocks {
            for bn in [&b.bn1, &b.bn2] {
                h.absorb(bn.running_mean.iter());
                h.absorb(bn.running_var.iter());
            }
        }
        h.0
    }
}

pub(crate) struct Fnv(pub u64);

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }

    pub fn absorb<'a>(&mut self, values: impl Iterator<Item = &'a f64>) {
        for v in values {
            for b in v.to_le_bytes() {
                self.0 ^= b as u64;
                self.0 = self.0.wrapping_mul(0x100000001b3);
            }
        }
    }
}
