//! Minimal CPU neural-network layers with manual backprop.
//!
//! Tensors are `f64` ndarrays in `(N, C, H, W)` layout. Every layer caches
//! what its backward pass needs during a training forward; backward passes
//! return the input gradient and optionally accumulate parameter gradients,
//! so the same machinery serves training (parameter grads) and attack
//! crafting (input grads only).
//!
//! Batch items are processed in parallel where layers allow it, but every
//! floating-point reduction happens in a fixed sequential order, keeping
//! results bit-identical across thread counts.

mod batchnorm;
mod conv;
mod linear;

pub use batchnorm::{BatchNorm2d, BnMode};
pub use conv::Conv2d;
pub use linear::{global_avg_pool, global_avg_pool_backward, Linear};

use ndarray::{Array4, Dimension};
use rand::Rng;

pub type Tensor4 = Array4<f64>;

/// A trainable tensor with its gradient and SGD momentum buffer.
#[derive(Debug, Clone)]
pub struct Param<D: Dimension> {
    pub value: ndarray::Array<f64, D>,
    pub grad: ndarray::Array<f64, D>,
    pub velocity: ndarray::Array<f64, D>,
}

impl<D: Dimension> Param<D> {
    pub fn new(value: ndarray::Array<f64, D>) -> Self {
        let grad = ndarray::Array::zeros(value.raw_dim());
        let velocity = ndarray::Array::zeros(value.raw_dim());
        Param {
            value,
            grad,
            velocity,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// One SGD-with-momentum update: `v = mu*v + g + wd*w; w -= lr*v`.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        ndarray::Zip::from(&mut self.velocity)
            .and(&self.grad)
            .and(&self.value)
            .for_each(|v, &g, &w| *v = momentum * *v + g + weight_decay * w);
        ndarray::Zip::from(&mut self.value)
            .and(&self.velocity)
            .for_each(|w, &v| *w -= lr * v);
    }
}

/// Kaiming-uniform fill for ReLU networks: `U(-b, b)` with
/// `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ndarray::ArrayD<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).expect("shape matches data")
}

/// Elementwise ReLU; returns the activation, which doubles as the backward
/// mask.
pub fn relu(x: &Tensor4) -> Tensor4 {
    x.mapv(|v| v.max(0.0))
}

/// Backward of [`relu`] given its cached output.
pub fn relu_backward(dy: &Tensor4, y: &Tensor4) -> Tensor4 {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx)
        .and(y)
        .for_each(|d, &o| {
            if o <= 0.0 {
                *d = 0.0;
            }
        });
    dx
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn relu_masks_negative_gradients() {
        let x = Array4::from_shape_vec((1, 1, 1, 4), vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 0.0, 0.5, 2.0]);
        let dy = Array4::ones((1, 1, 1, 4));
        let dx = relu_backward(&dy, &y);
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn sgd_step_matches_hand_update() {
        let mut p = Param::new(ndarray::arr1(&[1.0, -2.0]));
        p.grad.assign(&ndarray::arr1(&[0.5, 0.25]));
        p.sgd_step(0.1, 0.9, 0.0);
        // v = g, w -= lr*g
        assert!((p.value[0] - 0.95).abs() < 1e-12);
        p.grad.fill(0.0);
        p.sgd_step(0.1, 0.9, 0.0);
        // v = 0.9*0.5 = 0.45, w = 0.95 - 0.045
        assert!((p.value[0] - 0.905).abs() < 1e-12);
    }
}
