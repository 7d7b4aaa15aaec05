//! Minimal conv-net building blocks over `ndarray` arrays.
//!
//! Single-sample `(C, H, W)` layout; batching happens one level up by
//! parallelizing over samples and reducing gradients in index order, which
//! keeps training bit-deterministic.

use ndarray::{Array1, Array2, Array3};

/// Unfold `(C, H, W)` into a `(C*k*k, out_h*out_w)` column matrix.
pub fn im2col(
    x: &Array3<f32>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f32>, usize, usize) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let out_h = (h + 2 * pad - k) / stride + 1;
    let out_w = (w + 2 * pad - k) / stride + 1;
    let mut col = Array2::<f32>::zeros((c * k * k, out_h * out_w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..out_h {
                    let ri = (oi * stride + ki) as isize - pad as isize;
                    if ri < 0 || ri as usize >= h {
                        continue;
                    }
                    for oj in 0..out_w {
                        let cj = (oj * stride + kj) as isize - pad as isize;
                        if cj < 0 || cj as usize >= w {
                            continue;
                        }
                        col[(row, oi * out_w + oj)] = x[(ci, ri as usize, cj as usize)];
                    }
                }
            }
        }
    }
    (col, out_h, out_w)
}

/// Scatter a column-matrix gradient back to input space.
pub fn col2im(
    dcol: &Array2<f32>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f32> {
    let out_h = (h + 2 * pad - k) / stride + 1;
    let out_w = (w + 2 * pad - k) / stride + 1;
    let mut dx = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..out_h {
                    let ri = (oi * stride + ki) as isize - pad as isize;
                    if ri < 0 || ri as usize >= h {
                        continue;
                    }
                    for oj in 0..out_w {
                        let cj = (oj * stride + kj) as isize - pad as isize;
                        if cj < 0 || cj as usize >= w {
                            continue;
                        }
                        dx[(ci, ri as usize, cj as usize)] += dcol[(row, oi * out_w + oj)];
                    }
                }
            }
        }
    }
    dx
}

/// A 2-D convolution layer with weights stored in GEMM layout
/// `(c_out, c_in * k * k)`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: Array2<f32>,
    pub b: Array1<f32>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        // He-normal init via Box-Muller.
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let mut gauss = || {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let w = Array2::from_shape_fn((c_out, c_in * k * k), |_| (gauss() * std) as f32);
        Self {
            w,
            b: Array1::zeros(c_out),
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Forward pass; also returns the unfolded input for reuse in backward.
    pub fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, Array2<f32>) {
        let (col, out_h, out_w) = im2col(x, self.k, self.stride, self.pad);
        let mut out_mat = Array2::<f32>::zeros((self.c_out, out_h * out_w));
        ndarray::linalg::general_mat_mul(1.0, &self.w, &col, 0.0, &mut out_mat);
        for (mut row, &b) in out_mat.rows_mut().into_iter().zip(self.b.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let out = out_mat.into_shape_with_order((self.c_out, out_h, out_w)).unwrap();
        (out, col)
    }

    /// Backward pass: returns (dW, db, dX).
    pub fn backward(
        &self,
        col: &Array2<f32>,
        x_h: usize,
        x_w: usize,
        d_out: &Array3<f32>,
    ) -> (Array2<f32>, Array1<f32>, Array3<f32>) {
        let (c_out, out_h, out_w) = (d_out.shape()[0], d_out.shape()[1], d_out.shape()[2]);
        let d_mat = d_out
            .view()
            .into_shape_with_order((c_out, out_h * out_w))
            .unwrap();
        let mut dw = Array2::<f32>::zeros(self.w.raw_dim());
        ndarray::linalg::general_mat_mul(1.0, &d_mat, &col.t(), 0.0, &mut dw);
        let db = d_mat.sum_axis(ndarray::Axis(1));
        let mut dcol = Array2::<f32>::zeros(col.raw_dim());
        ndarray::linalg::general_mat_mul(1.0, &self.w.t(), &d_mat, 0.0, &mut dcol);
        let dx = col2im(&dcol, self.c_in, x_h, x_w, self.k, self.stride, self.pad);
        (dw, db, dx)
    }
}

pub fn relu(x: &Array3<f32>) -> Array3<f32> {
    x.mapv(|v| v.max(0.0))
}

/// Propagate gradient through ReLU given the pre-activation.
pub fn relu_backward(pre: &Array3<f32>, d_out: &Array3<f32>) -> Array3<f32> {
    let mut dx = d_out.clone();
    dx.zip_mut_with(pre, |d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn upsample_nearest(x: &Array3<f32>, factor: usize) -> Array3<f32> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Array3::from_shape_fn((c, h * factor, w * factor), |(ci, r, cc)| {
        x[(ci, r / factor, cc / factor)]
    })
}

pub fn upsample_nearest_backward(d_out: &Array3<f32>, factor: usize) -> Array3<f32> {
    let (c, h, w) = (d_out.shape()[0], d_out.shape()[1], d_out.shape()[2]);
    let (ih, iw) = (h / factor, w / factor);
    let mut dx = Array3::<f32>::zeros((c, ih, iw));
    for ci in 0..c {
        for r in 0..h {
            for cc in 0..w {
                dx[(ci, r / factor, cc / factor)] += d_out[(ci, r, cc)];
            }
        }
    }
    dx
}

/// Source coordinate and blend weights for half-pixel-centered bilinear
/// interpolation at an integer upscale factor.
fn bilinear_taps(i: usize, factor: usize, size_in: usize) -> (usize, usize, f32) {
    let src = (i as f32 + 0.5) / factor as f32 - 0.5;
    let lo = src.floor();
    let frac = src - lo;
    let i0 = lo.max(0.0) as usize;
    let i1 = (i0 + 1).min(size_in - 1);
    let i0 = i0.min(size_in - 1);
    (i0, i1, frac.clamp(0.0, 1.0))
}

/// Bilinear upsample by an integer factor (half-pixel centers).
pub fn bilinear_upsample(x: &Array3<f32>, factor: usize) -> Array3<f32> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Array3::<f32>::zeros((c, oh, ow));
    for r in 0..oh {
        let (r0, r1, fr) = bilinear_taps(r, factor, h);
        for cc in 0..ow {
            let (c0, c1, fc) = bilinear_taps(cc, factor, w);
            for ci in 0..c {
                out[(ci, r, cc)] = x[(ci, r0, c0)] * (1.0 - fr) * (1.0 - fc)
                    + x[(ci, r1, c0)] * fr * (1.0 - fc)
                    + x[(ci, r0, c1)] * (1.0 - fr) * fc
                    + x[(ci, r1, c1)] * fr * fc;
            }
        }
    }
    out
}

/// Transpose of [`bilinear_upsample`]: scatter output gradients back with
/// the same interpolation weights.
pub fn bilinear_upsample_backward(d_out: &Array3<f32>, factor: usize) -> Array3<f32> {
    let (c, oh, ow) = (d_out.shape()[0], d_out.shape()[1], d_out.shape()[2]);
    let (h, w) = (oh / factor, ow / factor);
    let mut dx = Array3::<f32>::zeros((c, h, w));
    for r in 0..oh {
        let (r0, r1, fr) = bilinear_taps(r, factor, h);
        for cc in 0..ow {
            let (c0, c1, fc) = bilinear_taps(cc, factor, w);
            for ci in 0..c {
                let g = d_out[(ci, r, cc)];
                dx[(ci, r0, c0)] += g * (1.0 - fr) * (1.0 - fc);
                dx[(ci, r1, c0)] += g * fr * (1.0 - fc);
                dx[(ci, r0, c1)] += g * (1.0 - fr) * fc;
                dx[(ci, r1, c1)] += g * fr * fc;
            }
        }
    }
    dx
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels(logits: &Array3<f32>) -> Array3<f32> {
    let (k, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let mut out = Array3::<f32>::zeros((k, h, w));
    for r in 0..h {
        for c in 0..w {
            let mut max = f32::NEG_INFINITY;
            for ki in 0..k {
                max = max.max(logits[(ki, r, c)]);
            }
            let mut sum = 0.0f32;
            for ki in 0..k {
                let e = (logits[(ki, r, c)] - max).exp();
                out[(ki, r, c)] = e;
                sum += e;
            }
            for ki in 0..k {
                out[(ki, r, c)] /= sum;
            }
        }
    }
    out
}

/// Mean per-pixel cross-entropy over non-ignored pixels, fused with the
/// softmax gradient. Returns `(loss, d_logits)`; loss accumulates in f64.
pub fn softmax_cross_entropy(
    logits: &Array3<f32>,
    target: &ndarray::Array2<u8>,
    ignore_index: u8,
) -> Option<(f64, Array3<f32>)> {
    let (k, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let mut n_valid = 0usize;
    for &t in target.iter() {
        if t != ignore_index {
            n_valid += 1;
        }
    }
    if n_valid == 0 {
        return None;
    }
    let probs = softmax_channels(logits);
    let mut loss = 0.0f64;
    let mut d = Array3::<f32>::zeros((k, h, w));
    let inv_n = 1.0 / n_valid as f32;
    for r in 0..h {
        for c in 0..w {
            let t = target[(r, c)];
            if t == ignore_index {
                continue;
            }
            let p = probs[(t as usize, r, c)].max(1e-12);
            loss -= (p as f64).ln();
            for ki in 0..k {
                let grad = probs[(ki, r, c)] - if ki == t as usize { 1.0 } else { 0.0 };
                d[(ki, r, c)] = grad * inv_n;
            }
        }
    }
    Some((loss / n_valid as f64, d))
}
