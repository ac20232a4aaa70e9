//! Convolution kernels (im2col + GEMM) and their adjoints.
//!
//! Layouts: activations NCHW, conv weights `[c_out, c_in, k, k]`, transposed
//! conv weights `[c_in, c_out, k, k]`.

use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Geometry of a single strided, zero-padded 2-D correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        ConvGeom {
            channels,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// True when im2col is the identity (1x1, stride 1, no padding).
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output-column range `[lo, hi)` whose input column `ox*s + kj - pad` is in bounds.
    #[inline]
    fn valid_ox(&self, kj: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kj as isize - self.pad as isize;
        // smallest ox with ox*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest ox with ox*s + off <= w-1
        let last = self.w as isize - 1 - off;
        let hi = if last < 0 { 0 } else { last / s + 1 };
        let lo = lo.clamp(0, self.w_out as isize) as usize;
        let hi = hi.clamp(0, self.w_out as isize) as usize;
        (lo, hi.max(lo))
    }
}

/// Unfolds one image `[C, H, W]` into `cols` of shape `[C*k*k, Ho*Wo]`.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = g.valid_ox(kj);
                for oy in 0..g.h_out {
                    let iy = (oy * s + ki) as isize - p as isize;
                    let seg = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    if s == 1 {
                        let ix0 = lo + kj - p;
                        seg[lo..hi].copy_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (ox, v) in seg[lo..hi].iter_mut().enumerate() {
                            *v = src_row[(ox + lo) * s + kj - p];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dx` (`[C, H, W]`).
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = g.valid_ox(kj);
                for oy in 0..g.h_out {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let seg = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    for ox in lo..hi {
                        dst_row[ox * s + kj - p] += seg[ox];
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

/// Strided zero-padded correlation.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let (co, ci, k, _) = w.dims4();
    assert_eq!(c, ci, "conv2d channel mismatch");
    let g = ConvGeom::new(c, h, wd, k, stride, pad);
    let plane = g.col_cols();
    let mut out = Tensor::zeros(&[n, co, g.h_out, g.w_out]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * plane] };
    let wmat = MatRef::new(w.data(), co, g.col_rows());
    for bi in 0..n {
        let xin = &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
        let rhs = if g.is_pointwise() {
            MatRef::new(xin, g.col_rows(), plane)
        } else {
            im2col(xin, &g, &mut cols);
            MatRef::new(&cols, g.col_rows(), plane)
        };
        let dst = &mut out.data_mut()[bi * co * plane..(bi + 1) * co * plane];
        gemm(T::one(), wmat, rhs, T::zero(), dst);
        if let Some(b) = b {
            add_bias(dst, b.data(), plane);
        }
    }
    out
}

/// Gradients of [`conv2d`]: `(dx, dw, db)` for the requested parts.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, wd) = x.dims4();
    let (co, _, k, _) = w.dims4();
    let g = ConvGeom::new(c, h, wd, k, stride, pad);
    let plane = g.col_cols();
    let krows = g.col_rows();
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[co]));
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { krows * plane }];
    let mut dcols = vec![T::zero(); if need_dx && !g.is_pointwise() { krows * plane } else { 0 }];
    for bi in 0..n {
        let gy = &dy.data()[bi * co * plane..(bi + 1) * co * plane];
        let xin = &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
        if let Some(dw) = dw.as_mut() {
            let cm = if g.is_pointwise() {
                MatRef::transposed(xin, krows, plane)
            } else {
                im2col(xin, &g, &mut cols);
                MatRef::transposed(&cols, krows, plane)
            };
            gemm(T::one(), MatRef::new(gy, co, plane), cm, T::one(), dw.data_mut());
        }
        if let Some(db) = db.as_mut() {
            for (o, d) in db.data_mut().iter_mut().enumerate() {
                *d += gy[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let wt = MatRef::transposed(w.data(), co, krows);
            let dst = &mut dx.data_mut()[bi * c * h * wd..(bi + 1) * c * h * wd];
            if g.is_pointwise() {
                gemm(T::one(), wt, MatRef::new(gy, co, plane), T::zero(), dst);
            } else {
                gemm(T::one(), wt, MatRef::new(gy, co, plane), T::zero(), &mut dcols);
                col2im(&dcols, &g, dst);
            }
        }
    }
    (dx, dw, db)
}

/// Output size of a transposed convolution.
pub fn conv_transpose_out(size: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (size - 1) * stride + k + out_pad - 2 * pad
}

/// Transposed convolution (the adjoint of a strided correlation), plus bias.
pub fn conv_transpose2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Tensor<T> {
    let (n, ci, h, wd) = x.dims4();
    let (wi, co, k, _) = w.dims4();
    assert_eq!(ci, wi, "conv_transpose2d channel mismatch");
    let ho = conv_transpose_out(h, k, stride, pad, out_pad);
    let wo = conv_transpose_out(wd, k, stride, pad, out_pad);
    let g = ConvGeom::new(co, ho, wo, k, stride, pad);
    assert_eq!((g.h_out, g.w_out), (h, wd), "inconsistent transposed-conv geometry");
    let plane_in = h * wd;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let mut cols = vec![T::zero(); g.col_rows() * plane_in];
    for bi in 0..n {
        let xin = &x.data()[bi * ci * plane_in..(bi + 1) * ci * plane_in];
        gemm(
            T::one(),
            MatRef::transposed(w.data(), ci, g.col_rows()),
            MatRef::new(xin, ci, plane_in),
            T::zero(),
            &mut cols,
        );
        let dst = &mut out.data_mut()[bi * co * ho * wo..(bi + 1) * co * ho * wo];
        col2im(&cols, &g, dst);
        if let Some(b) = b {
            add_bias(dst, b.data(), ho * wo);
        }
    }
    out
}

#[allow(clippy::type_complexity, clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, ci, h, wd) = x.dims4();
    let (_, co, k, _) = w.dims4();
    let (_, _, ho, wo) = dy.dims4();
    let g = ConvGeom::new(co, ho, wo, k, stride, pad);
    let plane_in = h * wd;
    let krows = g.col_rows();
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[co]));
    let mut cols = vec![T::zero(); krows * plane_in];
    for bi in 0..n {
        let gy = &dy.data()[bi * co * ho * wo..(bi + 1) * co * ho * wo];
        if let Some(db) = db.as_mut() {
            for (o, d) in db.data_mut().iter_mut().enumerate() {
                *d += gy[o * ho * wo..(o + 1) * ho * wo].iter().copied().sum::<T>();
            }
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        im2col(gy, &g, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[bi * ci * plane_in..(bi + 1) * ci * plane_in];
            gemm(
                T::one(),
                MatRef::new(w.data(), ci, krows),
                MatRef::new(&cols, krows, plane_in),
                T::zero(),
                dst,
            );
        }
        if let Some(dw) = dw.as_mut() {
            let xin = &x.data()[bi * ci * plane_in..(bi + 1) * ci * plane_in];
            gemm(
                T::one(),
                MatRef::new(xin, ci, plane_in),
                MatRef::transposed(&cols, krows, plane_in),
                T::one(),
                dw.data_mut(),
            );
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct definition of a zero-padded strided correlation.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4();
        let (co, _, k, _) = w.dims4();
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for b in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * s + ki) as isize - p as isize;
                                    let ix = (ox * s + kj) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at4(b, ci, iy as usize, ix as usize)
                                            * w.at4(o, ci, ki, kj);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(s, p, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3), (1, 2, 5)] {
            let x = rand_tensor(&[2, 3, 7, 6], &mut rng);
            let w = rand_tensor(&[4, 3, k, k], &mut rng);
            let got = conv2d(&x, &w, None, s, p);
            let expect = conv_naive(&x, &w, s, p);
            assert!(got.max_abs_diff(&expect) < 1e-12, "s={s} p={p} k={k}");
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(y), x> == <y, convT(x)> for matching geometry.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_tensor(&[3, 4, 3, 3], &mut rng); // convT: 3 -> 4 channels
        let x = rand_tensor(&[1, 3, 5, 6], &mut rng);
        let up = conv_transpose2d(&x, &w, None, 2, 1, 1);
        assert_eq!(up.shape(), &[1, 4, 10, 12]);
        let y = rand_tensor(&[1, 4, 10, 12], &mut rng);
        let down = conv2d(&y, &w, None, 2, 1);
        let lhs: f64 = down.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = up.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
