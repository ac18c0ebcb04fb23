//! 2D convolution via im2col and GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;

use super::{kaiming_uniform, Param, Tensor4};
use crate::par;

/// `kernel x kernel` convolution with `padding = kernel / 2`, so spatial size
/// maps `H -> H / stride` for even sizes.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// Flattened kernel, shape `(c_out, c_in * k * k)`.
    pub weight: Param<ndarray::Ix2>,
    pub bias: Option<Param<ndarray::Ix1>>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    cached_input: Option<Tensor4>,
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = kaiming_uniform(&[c_out, fan_in], fan_in, rng)
            .into_dimensionality()
            .expect("2d weight");
        Conv2d {
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(Array1::zeros(c_out))),
            c_in,
            c_out,
            kernel,
            stride,
            cached_input: None,
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.padding();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    /// Forward pass. `cache` retains the input for a later [`Self::backward`].
    pub fn forward(&mut self, x: &Tensor4, cache: bool) -> Tensor4 {
        let (n, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let mut out = Tensor4::zeros((n, self.c_out, ho, wo));
        let x_flat = x.as_slice().expect("standard layout");
        let in_len = c_in * h * w;
        let out_len = self.c_out * ho * wo;
        let weight = &self.weight.value;
        let bias = self.bias.as_ref().map(|b| &b.value);

        par::for_each_chunk(out.as_slice_mut().expect("standard layout"), out_len, |i, chunk| {
            let cols = im2col(
                &x_flat[i * in_len..(i + 1) * in_len],
                c_in,
                h,
                w,
                self.kernel,
                self.stride,
                self.padding(),
            );
            let mut y = ArrayViewMut2::from_shape((self.c_out, ho * wo), chunk)
                .expect("chunk shape");
            general_mat_mul(1.0, weight, &cols, 0.0, &mut y);
            if let Some(b) = bias {
                for (mut row, &bv) in y.rows_mut().into_iter().zip(b.iter()) {
                    row.mapv_inplace(|v| v + bv);
                }
            }
        });

        if cache {
            self.cached_input = Some(x.clone());
        }
        out
    }

    /// Backward pass. Returns the input gradient; accumulates parameter
    /// gradients only when `param_grads` is set (attacks skip them).
    pub fn backward(&mut self, dout: &Tensor4, param_grads: bool) -> Tensor4 {
        let x = self
            .cached_input
            .as_ref()
            .expect("conv backward without cached forward");
        let (n, c_in, h, w) = x.dim();
        let (nd, c_out, ho, wo) = dout.dim();
        assert_eq!(n, nd);
        assert_eq!(c_out, self.c_out);

        let mut dx = Tensor4::zeros((n, c_in, h, w));
        let x_flat = x.as_slice().expect("standard layout");
        let dout_flat = dout.as_slice().expect("standard layout");
        let in_len = c_in * h * w;
        let out_len = c_out * ho * wo;
        let weight = &self.weight.value;
        let kernel = self.kernel;
        let stride = self.stride;
        let padding = self.padding();

        // One (dw, db) pair per image, reduced sequentially below.
        let per_image: Vec<Option<(Array2<f64>, Array1<f64>)>> = par::map_chunks(
            dx.as_slice_mut().expect("standard layout"),
            in_len,
            |i, dx_chunk| {
                let dy = ArrayView2::from_shape(
                    (c_out, ho * wo),
                    &dout_flat[i * out_len..(i + 1) * out_len],
                )
                .expect("dout shape");
                let cols = im2col(
                    &x_flat[i * in_len..(i + 1) * in_len],
                    c_in,
                    h,
                    w,
                    kernel,
                    stride,
                    padding,
                );

                // dcols = W^T . dy, scattered back to the input image.
                let mut dcols = Array2::zeros((c_in * kernel * kernel, ho * wo));
                general_mat_mul(1.0, &weight.t(), &dy, 0.0, &mut dcols);
                col2im(&dcols, dx_chunk, c_in, h, w, kernel, stride, padding);

                if param_grads {
                    let mut dw = Array2::zeros((c_out, c_in * kernel * kernel));
                    general_mat_mul(1.0, &dy, &cols.t(), 0.0, &mut dw);
                    let db = dy.sum_axis(ndarray::Axis(1));
                    Some((dw, db))
                } else {
                    None
                }
            },
        );

        if param_grads {
            for item in per_image.into_iter().flatten() {
                self.weight.grad += &item.0;
                if let Some(b) = self.bias.as_mut() {
                    b.grad += &item.1;
                }
            }
        }
        dx
    }

    pub fn clear_cache(&mut self) {
        self.cached_input = None;
    }
}

/// Unfolds one image (`c_in * h * w` flat) into a `(c_in*k*k, ho*wo)` patch
/// matrix with zero padding.
fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Array2<f64> {
    let ho = (h + 2 * padding - kernel) / stride + 1;
    let wo = (w + 2 * padding - kernel) / stride + 1;
    let mut cols = Array2::zeros((c_in * kernel * kernel, ho * wo));
    let cols_slice = cols.as_slice_mut().expect("fresh array");
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let out_row = &mut cols_slice[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut out_row[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    dx: &mut [f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) {
    let ho = (h + 2 * padding - kernel) / stride + 1;
    let wo = (w + 2 * padding - kernel) / stride + 1;
    let dcols_slice = dcols.as_slice().expect("standard layout");
    for c in 0..c_in {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let src_row = &dcols_slice[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &src_row[oy * wo..(oy + 1) * wo];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::rel_err;
    use super::*;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut r = rng();
        let mut conv = Conv2d::new(1, 1, 3, 1, false, &mut r);
        conv.weight.value.fill(0.0);
        conv.weight.value[[0, 4]] = 1.0; // center tap
        let x = Tensor4::from_shape_fn((1, 1, 4, 4), |(_, _, y, x)| (y * 4 + x) as f64);
        let y = conv.forward(&x, false);
        assert_eq!(y, x);
    }

    #[test]
    fn stride_two_halves_spatial_size() {
        let mut r = rng();
        let mut conv = Conv2d::new(3, 8, 3, 2, false, &mut r);
        let x = Tensor4::zeros((2, 3, 16, 16));
        let y = conv.forward(&x, false);
        assert_eq!(y.dim(), (2, 8, 8, 8));
    }

    #[test]
    fn brute_force_forward_agreement() {
        // Direct nested-loop convolution as an independent reference.
        let mut r = rng();
        let mut conv = Conv2d::new(2, 3, 3, 2, true, &mut r);
        let x = Tensor4::from_shape_fn((2, 2, 6, 6), |(n, c, y, x)| {
            ((n + 1) as f64) * (0.1 * y as f64 - 0.07 * x as f64 + 0.3 * c as f64).sin()
        });
        let y = conv.forward(&x, false);

        let (ho, wo) = conv.out_hw(6, 6);
        for n in 0..2 {
            for co in 0..3 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.as_ref().unwrap().value[co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 6 || ix >= 6 {
                                        continue;
                                    }
                                    acc += conv.weight.value[[co, (ci * 3 + ky) * 3 + kx]]
                                        * x[[n, ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                        assert!(
                            (acc - y[[n, co, oy, ox]]).abs() < 1e-12,
                            "mismatch at {n},{co},{oy},{ox}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut r = rng();
        let mut conv = Conv2d::new(2, 3, 3, 2, true, &mut r);
        let x = Tensor4::from_shape_fn((2, 2, 4, 4), |(n, c, y, x)| {
            0.3 * ((n * 31 + c * 7 + y * 3 + x) as f64).sin()
        });

        // Scalar objective: weighted sum of outputs, so dL/dy is fixed.
        let dy_weights = |shape: (usize, usize, usize, usize)| {
            Tensor4::from_shape_fn(shape, |(n, c, y, x)| {
                ((n * 13 + c * 5 + y * 2 + x) as f64 * 0.7).cos()
            })
        };

        let y = conv.forward(&x, true);
        let dy = dy_weights(y.dim());
        conv.weight.zero_grad();
        if let Some(b) = conv.bias.as_mut() {
            b.zero_grad();
        }
        let dx = conv.backward(&dy, true);

        let h = 1e-6;
        let loss = |conv: &mut Conv2d, x: &Tensor4| -> f64 {
            let y = conv.forward(x, false);
            (&y * &dy_weights(y.dim())).sum()
        };

        // Weight gradient probes.
        for &(i, j) in &[(0, 0), (1, 7), (2, 17), (0, 9)] {
            let orig = conv.weight.value[[i, j]];
            conv.weight.value[[i, j]] = orig + h;
            let lp = loss(&mut conv, &x);
            conv.weight.value[[i, j]] = orig - h;
            let lm = loss(&mut conv, &x);
            conv.weight.value[[i, j]] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                rel_err(conv.weight.grad[[i, j]], numeric) < 1e-6,
                "weight grad mismatch at ({i},{j})"
            );
        }

        // Input gradient probes.
        let mut xp = x.clone();
        for &(n, c, yy, xx) in &[(0, 0, 0, 0), (1, 1, 3, 2), (0, 1, 2, 1)] {
            let orig = xp[[n, c, yy, xx]];
            xp[[n, c, yy, xx]] = orig + h;
            let lp = loss(&mut conv, &xp);
            xp[[n, c, yy, xx]] = orig - h;
            let lm = loss(&mut conv, &xp);
            xp[[n, c, yy, xx]] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                rel_err(dx[[n, c, yy, xx]], numeric) < 1e-6,
                "input grad mismatch at ({n},{c},{yy},{xx})"
            );
        }

        // Bias gradient equals the plain sum of dy over each channel.
        let db = conv.bias.as_ref().unwrap().grad.clone();
        for co in 0..3 {
            let expected: f64 = (0..2)
                .map(|n| dy.index_axis(ndarray::Axis(0), n).index_axis(ndarray::Axis(0), co).sum())
                .sum();
            assert!(rel_err(db[co], expected) < 1e-9);
        }
    }
}
