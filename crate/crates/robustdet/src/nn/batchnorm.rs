//! Batch normalization over `(N, H, W)` per channel.

use ndarray::Array1;

use super::{Param, Tensor4};
use crate::par;

/// Which statistics a forward pass normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the current batch statistics; optionally fold them
    /// into the running estimates.
    Batch { update_running: bool },
    /// Normalize with the stored running statistics and leave them as-is.
    Frozen,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param<ndarray::Ix1>,
    pub beta: Param<ndarray::Ix1>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    /// Fraction of the new batch statistic folded into the running estimate.
    pub momentum: f64,
    pub eps: f64,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    x_hat: Tensor4,
    inv_std: Array1<f64>,
    mode: BnMode,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Array1::ones(channels)),
            beta: Param::new(Array1::zeros(channels)),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&mut self, x: &Tensor4, mode: BnMode, cache: bool) -> Tensor4 {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batchnorm channels");
        let count = n * h * w;
        let x_flat = x.as_slice().expect("standard layout");
        let plane = h * w;

        let (mean, var) = match mode {
            BnMode::Batch { .. } => {
                assert!(count > 1, "batch statistics need more than one value");
                // Per-channel mean/variance; the inner loops are sequential
                // so the reduction order never depends on threading.
                let stats: Vec<(f64, f64)> = par::map_indexed(c, |ci| {
                    let mut sum = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for &v in &x_flat[base..base + plane] {
                            sum += v;
                        }
                    }
                    let mean = sum / count as f64;
                    let mut ss = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for &v in &x_flat[base..base + plane] {
                            let d = v - mean;
                            ss += d * d;
                        }
                    }
                    (mean, ss / count as f64)
                });
                let mean = Array1::from_iter(stats.iter().map(|s| s.0));
                let var = Array1::from_iter(stats.iter().map(|s| s.1));
                if matches!(mode, BnMode::Batch { update_running: true }) {
                    let unbias = count as f64 / (count as f64 - 1.0);
                    for ci in 0..c {
                        self.running_mean[ci] =
                            (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean[ci];
                        self.running_var[ci] = (1.0 - self.momentum) * self.running_var[ci]
                            + self.momentum * var[ci] * unbias;
                    }
                }
                (mean, var)
            }
            BnMode::Frozen => (self.running_mean.clone(), self.running_var.clone()),
        };

        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut x_hat = Tensor4::zeros((n, c, h, w));
        {
            par::for_each_chunk(
                x_hat.as_slice_mut().expect("fresh array"),
                plane,
                |idx, chunk| {
                    let ci = idx % c;
                    let base = idx * plane;
                    let (m, s) = (mean[ci], inv_std[ci]);
                    for (d, &v) in chunk.iter_mut().zip(&x_flat[base..base + plane]) {
                        *d = (v - m) * s;
                    }
                },
            );
        }

        let mut y = Tensor4::zeros((n, c, h, w));
        {
            let xh_flat = x_hat.as_slice().expect("standard layout");
            let gamma = &self.gamma.value;
            let beta = &self.beta.value;
            par::for_each_chunk(y.as_slice_mut().expect("fresh array"), plane, |idx, chunk| {
                let ci = idx % c;
                let base = idx * plane;
                let (g, b) = (gamma[ci], beta[ci]);
                for (d, &v) in chunk.iter_mut().zip(&xh_flat[base..base + plane]) {
                    *d = g * v + b;
                }
            });
        }

        if cache {
            self.cache = Some(Cache {
                x_hat,
                inv_std,
                mode,
            });
        }
        y
    }

    /// Backward pass mirroring the forward mode that was cached.
    pub fn backward(&mut self, dout: &Tensor4, param_grads: bool) -> Tensor4 {
        let cache = self
            .cache
            .as_ref()
            .expect("batchnorm backward without cached forward");
        let (n, c, h, w) = dout.dim();
        let plane = h * w;
        let count = (n * plane) as f64;
        let dy_flat = dout.as_slice().expect("standard layout");
        let xh_flat = cache.x_hat.as_slice().expect("standard layout");

        // Per-channel sums of dy and dy*x_hat.
        let sums: Vec<(f64, f64)> = par::map_indexed(c, |ci| {
            let mut s_dy = 0.0;
            let mut s_dyx = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for k in base..base + plane {
                    s_dy += dy_flat[k];
                    s_dyx += dy_flat[k] * xh_flat[k];
                }
            }
            (s_dy, s_dyx)
        });

        if param_grads {
            for ci in 0..c {
                self.beta.grad[ci] += sums[ci].0;
                self.gamma.grad[ci] += sums[ci].1;
            }
        }

        let gamma = &self.gamma.value;
        let inv_std = &cache.inv_std;
        let mut dx = Tensor4::zeros((n, c, h, w));
        match cache.mode {
            BnMode::Batch { .. } => {
                par::for_each_chunk(
                    dx.as_slice_mut().expect("fresh array"),
                    plane,
                    |idx, chunk| {
                        let ci = idx % c;
                        let base = idx * plane;
                        let scale = gamma[ci] * inv_std[ci];
                        let (s_dy, s_dyx) = sums[ci];
                        for (j, d) in chunk.iter_mut().enumerate() {
                            let k = base + j;
                            *d = scale
                                * (dy_flat[k] - s_dy / count - xh_flat[k] * s_dyx / count);
                        }
                    },
                );
            }
            BnMode::Frozen => {
                par::for_each_chunk(
                    dx.as_slice_mut().expect("fresh array"),
                    plane,
                    |idx, chunk| {
                        let ci = idx % c;
                        let base = idx * plane;
                        let scale = gamma[ci] * inv_std[ci];
                        for (j, d) in chunk.iter_mut().enumerate() {
                            *d = scale * dy_flat[base + j];
                        }
                    },
                );
            }
        }
        dx
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
