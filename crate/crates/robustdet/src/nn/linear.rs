//! Fully-connected layer and global average pooling.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2};
use rand::Rng;

use super::{kaiming_uniform, Param, Tensor4};

#[derive(Debug, Clone)]
pub struct Linear {
    /// Shape `(out, in)`.
    pub weight: Param<ndarray::Ix2>,
    pub bias: Param<ndarray::Ix1>,
    cached_input: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(dim_in: usize, dim_out: usize, rng: &mut impl Rng) -> Self {
        let weight = kaiming_uniform(&[dim_out, dim_in], dim_in, rng)
            .into_dimensionality()
            .expect("2d weight");
        Linear {
            weight: Param::new(weight),
            bias: Param::new(Array1::zeros(dim_out)),
            cached_input: None,
        }
    }

    /// `y = x W^T + b` for `x` of shape `(n, in)`.
    pub fn forward(&mut self, x: &Array2<f64>, cache: bool) -> Array2<f64> {
        let n = x.nrows();
        let mut y = Array2::zeros((n, self.weight.value.nrows()));
        general_mat_mul(1.0, x, &self.weight.value.t(), 0.0, &mut y);
        for mut row in y.rows_mut() {
            row += &self.bias.value;
        }
        if cache {
            self.cached_input = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>, param_grads: bool) -> Array2<f64> {
        let x = self
            .cached_input
            .as_ref()
            .expect("linear backward without cached forward");
        if param_grads {
            let mut dw = Array2::zeros(self.weight.value.raw_dim());
            general_mat_mul(1.0, &dy.t(), x, 0.0, &mut dw);
            self.weight.grad += &dw;
            self.bias.grad += &dy.sum_axis(ndarray::Axis(0));
        }
        let mut dx = Array2::zeros(x.raw_dim());
        general_mat_mul(1.0, dy, &self.weight.value, 0.0, &mut dx);
        dx
    }

    pub fn clear_cache(&mut self) {
        self.cached_input = None;
    }
}

/// Mean over the spatial dimensions: `(n, c, h, w) -> (n, c)`.
pub fn global_avg_pool(x: &Tensor4) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array2::zeros((n, c));
    let flat = x.as_slice().expect("standard layout");
    let plane = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let sum: f64 = flat[base..base + plane].iter().sum();
            out[[ni, ci]] = sum / plane as f64;
        }
    }
    out
}

/// Spreads `(n, c)` gradients uniformly back over `(n, c, h, w)`.
pub fn global_avg_pool_backward(dy: &Array2<f64>, h: usize, w: usize) -> Tensor4 {
    let (n, c) = dy.dim();
    let scale = 1.0 / (h * w) as f64;
    Tensor4::from_shape_fn((n, c, h, w), |(ni, ci, _, _)| dy[[ni, ci]] * scale)
}
