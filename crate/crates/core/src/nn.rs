//! Minimal dense layers with explicit forward/backward passes in f64.
//!
//! Convolution runs as im2col plus one matrix product; the column matrix is
//! cached for the backward pass. Batch normalization follows the usual
//! train/eval split: batch statistics while training, running averages
//! (momentum 0.1 by default) at inference.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array4, Axis};

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (out_channels, in_channels, kh, kw)
    pub weight: Array4<f64>,
    pub bias: Option<Array1<f64>>,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize, usize),
    out_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dim();
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (_, c_in, kh, kw) = self.weight.dim();
        let (_, c, h, w) = x.dim();
        if c != c_in {
            return Err(Error::validation(format!(
                "conv expects {c_in} input channels, got {c}"
            )));
        }
        if h + 2 * self.pad < kh || w + 2 * self.pad < kw {
            return Err(Error::validation(format!(
                "input {h}x{w} too small for {kh}x{kw} kernel with pad {}",
                self.pad
            )));
        }
        Ok(())
    }

    /// Lowers x to the column matrix: rows index (in_channel, ky, kx), columns
    /// index (batch, out_y, out_x).
    fn im2col(&self, x: &Array4<f64>) -> (Array2<f64>, (usize, usize)) {
        let (b, c, h, w) = x.dim();
        let (_, _, kh, kw) = self.weight.dim();
        let (ho, wo) = self.out_spatial(h, w);
        let mut cols = Array2::<f64>::zeros((c * kh * kw, b * ho * wo));
        let xs = x.as_slice().expect("contiguous input");
        let cs = cols.as_slice_mut().expect("contiguous cols");
        let n_out = b * ho * wo;
        for ci in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ci * kh + ky) * kw + kx;
                    let base = row * n_out;
                    for bi in 0..b {
                        let x_base = (bi * c + ci) * h * w;
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            let col_base = base + (bi * ho + oy) * wo;
                            if iy < 0 || iy >= h as isize {
                                continue; // zero padding, already zeroed
                            }
                            let x_row = x_base + iy as usize * w;
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    cs[col_base + ox] = xs[x_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        (cols, (ho, wo))
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<(Array4<f64>, Conv2dCache)> {
        self.check_input(x)?;
        let b = x.dim().0;
        let (c_out, c_in, kh, kw) = self.weight.dim();
        let (cols, (ho, wo)) = self.im2col(x);
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((c_out, c_in * kh * kw))
            .expect("contiguous weight");
        let mut y_mat = w_mat.dot(&cols); // (c_out, b*ho*wo)
        if let Some(bias) = &self.bias {
            for (mut row, &bv) in y_mat.rows_mut().into_iter().zip(bias.iter()) {
                row += bv;
            }
        }
        let y = regroup_channels(&y_mat, b, c_out, ho, wo);
        let cache = Conv2dCache {
            cols,
            in_shape: x.dim(),
            out_shape: (b, c_out, ho, wo),
        };
        Ok((y, cache))
    }

    /// Inference forward; no cache retained.
    pub fn forward_eval(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// Returns (dx, dweight, dbias).
    pub fn backward(
        &self,
        cache: &Conv2dCache,
        dy: &Array4<f64>,
    ) -> (Array4<f64>, Array4<f64>, Option<Array1<f64>>) {
        let (_, c_out, ho, wo) = cache.out_shape;
        assert_eq!(dy.dim(), cache.out_shape, "upstream gradient shape");
        let dy_mat = flatten_channels(dy); // (c_out, b*ho*wo)
        let dw_mat = dy_mat.dot(&cache.cols.t());
        let dw = dw_mat
            .into_shape_with_order(self.weight.dim())
            .expect("weight shape");
        let db = self.bias.as_ref().map(|_| dy_mat.sum_axis(Axis(1)));
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((c_out, self.weight.len() / c_out))
            .expect("contiguous weight");
        let d_cols = w_mat.t().dot(&dy_mat);
        let dx = self.col2im(&d_cols, cache.in_shape, (ho, wo));
        (dx, dw, db)
    }

    /// Scatter-adds column gradients back to input positions (transpose of im2col).
    fn col2im(
        &self,
        d_cols: &Array2<f64>,
        in_shape: (usize, usize, usize, usize),
        out_sp: (usize, usize),
    ) -> Array4<f64> {
        let (b, c, h, w) = in_shape;
        let (_, _, kh, kw) = self.weight.dim();
        let (ho, wo) = out_sp;
        let mut dx = Array4::<f64>::zeros(in_shape);
        let ds = d_cols.as_slice().expect("contiguous col grads");
        let xs = dx.as_slice_mut().expect("contiguous dx");
        let n_out = b * ho * wo;
        for ci in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ci * kh + ky) * kw + kx;
                    let base = row * n_out;
                    for bi in 0..b {
                        let x_base = (bi * c + ci) * h * w;
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * w;
                            let col_base = base + (bi * ho + oy) * wo;
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    xs[x_row + ix as usize] += ds[col_base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// (B,C,H,W) → (C, B·H·W) with column order (batch, y, x).
fn flatten_channels(x: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let mut out = Array2::zeros((c, b * h * w));
    let xs = x.as_slice().expect("contiguous");
    let os = out.as_slice_mut().expect("contiguous");
    let n = h * w;
    for bi in 0..b {
        for ci in 0..c {
            let src = (bi * c + ci) * n;
            let dst = ci * (b * n) + bi * n;
            os[dst..dst + n].copy_from_slice(&xs[src..src + n]);
        }
    }
    out
}

/// Inverse of [`flatten_channels`].
fn regroup_channels(y_mat: &Array2<f64>, b: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
    let mut out = Array4::zeros((b, c, h, w));
    let ys = y_mat.as_slice().expect("contiguous");
    let os = out.as_slice_mut().expect("contiguous");
    let n = h * w;
    for bi in 0..b {
        for ci in 0..c {
            let src = ci * (b * n) + bi * n;
            let dst = (bi * c + ci) * n;
            os[dst..dst + n].copy_from_slice(&ys[src..src + n]);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache {
    x_hat: Array4<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn check(&self, x: &Array4<f64>) -> Result<()> {
        if x.dim().1 != self.gamma.len() {
            return Err(Error::validation(format!(
                "batchnorm over {} channels got {} channels",
                self.gamma.len(),
                x.dim().1
            )));
        }
        Ok(())
    }

    /// Training forward: normalizes by batch statistics and folds them into the
    /// running averages (biased variance normalizes, unbiased feeds the
    /// running estimate when the count allows).
    pub fn forward_train(&mut self, x: &Array4<f64>) -> Result<(Array4<f64>, BnCache)> {
        self.check(x)?;
        let (b, c, h, w) = x.dim();
        let n = (b * h * w) as f64;
        let mut y = x.clone();
        let mut x_hat = Array4::zeros(x.dim());
        let mut inv_std = Array1::zeros(c);
        for ci in 0..c {
            let ch = x.index_axis(Axis(1), ci);
            let mean = ch.sum() / n;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = istd;
            let (g, bta) = (self.gamma[ci], self.beta[ci]);
            for bi in 0..b {
                for yy in 0..h {
                    for xx in 0..w {
                        let idx = [bi, ci, yy, xx];
                        let xh = (x[idx] - mean) * istd;
                        x_hat[idx] = xh;
                        y[idx] = g * xh + bta;
                    }
                }
            }
            let running_var_sample = if n > 1.0 { var * n / (n - 1.0) } else { var };
            self.running_mean[ci] = (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
            self.running_var[ci] =
                (1.0 - self.momentum) * self.running_var[ci] + self.momentum * running_var_sample;
        }
        Ok((y, BnCache { x_hat, inv_std }))
    }

    /// Inference forward using running statistics.
    pub fn forward_eval(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        self.check(x)?;
        let c = x.dim().1;
        let mut y = x.clone();
        for ci in 0..c {
            let istd = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            let (mean, g, bta) = (self.running_mean[ci], self.gamma[ci], self.beta[ci]);
            y.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|v| g * (v - mean) * istd + bta);
        }
        Ok(y)
    }

    /// Returns (dx, dgamma, dbeta) for the training forward.
    pub fn backward(&self, cache: &BnCache, dy: &Array4<f64>) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
        let (b, c, h, w) = dy.dim();
        let n = (b * h * w) as f64;
        let mut dx = Array4::zeros(dy.dim());
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        for ci in 0..c {
            let dy_c = dy.index_axis(Axis(1), ci);
            let xh_c = cache.x_hat.index_axis(Axis(1), ci);
            let sum_dy: f64 = dy_c.sum();
            let sum_dy_xh: f64 = dy_c.iter().zip(xh_c.iter()).map(|(a, b)| a * b).sum();
            dbeta[ci] = sum_dy;
            dgamma[ci] = sum_dy_xh;
            let scale = self.gamma[ci] * cache.inv_std[ci] / n;
            let mut dx_c = dx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut dx_c).and(&dy_c).and(&xh_c).for_each(|d, &g, &xh| {
                *d = scale * (n * g - sum_dy - xh * sum_dy_xh);
            });
        }
        (dx, dgamma, dbeta)
    }
}

/// max(x, 0) elementwise.
pub fn relu_forward(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Propagates gradient where the forward output was strictly positive.
pub fn relu_backward(y: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &yv| {
        if yv <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_shape_and_identity_kernel() {
        // 1x1 identity kernel reproduces the input.
        let mut w = Array4::zeros((2, 2, 1, 1));
        w[[0, 0, 0, 0]] = 1.0;
        w[[1, 1, 0, 0]] = 1.0;
        let conv = Conv2d {
            weight: w,
            bias: None,
            stride: 1,
            pad: 0,
        };
        let x = Array4::from_shape_fn((1, 2, 3, 3), |(_, c, y, xx)| (c * 9 + y * 3 + xx) as f64);
        let (y, _) = conv.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let conv = Conv2d {
            weight: Array4::zeros((4, 3, 3, 3)),
            bias: None,
            stride: 1,
            pad: 1,
        };
        let x = Array4::zeros((1, 2, 8, 8));
        assert!(conv.forward(&x).is_err());
    }

    #[test]
    fn batchnorm_eval_with_unit_stats_is_identity() {
        let bn = BatchNorm::new(3);
        let x = Array4::from_shape_fn((2, 3, 2, 2), |(b, c, y, xx)| (b + c + y + xx) as f64);
        let y = bn.forward_eval(&x).unwrap();
        let max_err = y
            .iter()
            .zip(x.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        // Unit stats give y = x/sqrt(1+eps), so deviation is about |x|*eps/2.
        assert!(max_err < 5.0 * bn.eps, "eps-only deviation, got {max_err}");
    }

    #[test]
    fn relu_clamps_and_gates() {
        let x = ndarray::array![[[[-1.0, 2.0], [0.0, -3.0]]]];
        let y = relu_forward(&x);
        assert_eq!(y, ndarray::array![[[[0.0, 2.0], [0.0, 0.0]]]]);
        let dy = Array4::ones((1, 1, 2, 2));
        let dx = relu_backward(&y, &dy);
        assert_eq!(dx, ndarray::array![[[[0.0, 1.0], [0.0, 0.0]]]]);
    }
}
