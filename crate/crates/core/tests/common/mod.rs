//! Nested-loop reference implementations shared by the test suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereo_style::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random horizontal offsets, a quarter of them whole pixels.
pub fn random_offsets(h: usize, w: usize, rng: &mut ChaCha8Rng, max: f64) -> Tensor<f64> {
    let data = (0..h * w)
        .map(|_| {
            let v: f64 = rng.gen_range(-max..max);
            if rng.gen_bool(0.25) { v.round() } else { v }
        })
        .collect();
    Tensor::from_vec(&[1, 1, h, w], data).unwrap()
}

pub fn random_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..h * w).map(|_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(&[1, 1, h, w], data).unwrap()
}

/// Asserts `|a - b| <= tol * max|b|` elementwise.
pub fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * scale, "{what}[{i}]: {x} vs {y} (scale {scale})");
    }
}

pub fn assert_scalar_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol * b.abs().max(1e-300), "{what}: {a} vs {b}");
}

fn at(t: &Tensor<f64>, c: usize, y: usize, x: usize) -> f64 {
    let (_, _, h, w) = t.dims4();
    t.data()[(c * h + y) * w + x]
}

/// Linear interpolation of `row` at the real coordinate `pos`, 0 outside `[0, len-1]`.
pub fn sample_row(row: &[f64], pos: f64) -> f64 {
    let last = (row.len() - 1) as f64;
    if pos < 0.0 || pos > last || pos.is_nan() {
        return 0.0;
    }
    let i = pos.floor();
    let t = pos - i;
    let i = i as usize;
    if i as f64 == last {
        return row[i];
    }
    row[i] * (1.0 - t) + row[i + 1] * t
}

/// `out(c, y, x) = src(c, y, x - offset(y, x))`.
pub fn warp(src: &Tensor<f64>, offset: &Tensor<f64>) -> Tensor<f64> {
    let (_, c, h, w) = src.dims4();
    let mut out = Tensor::zeros(src.shape());
    for ch in 0..c {
        for y in 0..h {
            let row: Vec<f64> = (0..w).map(|x| at(src, ch, y, x)).collect();
            for x in 0..w {
                let o = offset.data()[y * w + x];
                out.data_mut()[(ch * h + y) * w + x] = sample_row(&row, x as f64 - o);
            }
        }
    }
    out
}

/// 1 where `x - offset` stays inside the row.
pub fn warp_valid(offset: &Tensor<f64>) -> Vec<u8> {
    let (_, _, h, w) = offset.dims4();
    (0..h * w)
        .map(|i| {
            let pos = (i % w) as f64 - offset.data()[i];
            (pos >= 0.0 && pos <= (w - 1) as f64) as u8
        })
        .collect()
}

pub fn gram(f: &Tensor<f64>) -> Vec<f64> {
    let (_, c, h, w) = f.dims4();
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += at(f, i, y, x) * at(f, j, y, x);
                }
            }
            g[i * c + j] = s / (h * w) as f64;
        }
    }
    g
}

pub fn content(targets: &[Tensor<f64>], hats: &[Tensor<f64>]) -> f64 {
    targets
        .iter()
        .zip(hats)
        .map(|(t, h)| {
            let s: f64 = t.data().iter().zip(h.data()).map(|(a, b)| (a - b) * (a - b)).sum();
            s / t.numel() as f64
        })
        .sum()
}

pub fn style(style_feats: &[Tensor<f64>], hats: &[Tensor<f64>]) -> f64 {
    style_feats
        .iter()
        .zip(hats)
        .map(|(s, h)| {
            let c = s.dims4().1 as f64;
            let (gs, gh) = (gram(s), gram(h));
            gs.iter().zip(&gh).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (c * c)
        })
        .sum()
}

/// `(1 / sum M) sum_{c,y,x} M(y,x) (a - W(b))^2`, or 0 for an empty mask.
pub fn masked_view(a: &Tensor<f64>, b: &Tensor<f64>, offset: &Tensor<f64>, mask: &Tensor<f64>) -> f64 {
    let (_, c, h, w) = a.dims4();
    let count: f64 = mask.data().iter().sum();
    if count == 0.0 {
        return 0.0;
    }
    let wb = warp(b, offset);
    let mut s = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let d = at(a, ch, y, x) - at(&wb, ch, y, x);
                s += mask.data()[y * w + x] * d * d;
            }
        }
    }
    s / count
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize(src: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let (_, c, h, w) = src.dims4();
    let coord = |i: usize, n: usize, m: usize| -> (usize, usize, f64) {
        let p = ((i as f64 + 0.5) * n as f64 / m as f64 - 0.5).max(0.0);
        let lo = (p.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, if lo == hi { 0.0 } else { p - lo as f64 })
    };
    let mut out = Tensor::zeros(&[1, c, oh, ow]);
    for ch in 0..c {
        for i in 0..oh {
            let (y0, y1, fy) = coord(i, h, oh);
            for j in 0..ow {
                let (x0, x1, fx) = coord(j, w, ow);
                let top = at(src, ch, y0, x0) * (1.0 - fx) + at(src, ch, y0, x1) * fx;
                let bot = at(src, ch, y1, x0) * (1.0 - fx) + at(src, ch, y1, x1) * fx;
                out.data_mut()[(ch * oh + i) * ow + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// 3x3 convolution with zero padding 1 and bias, followed by ReLU.
pub fn conv3x3_relu(x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (_, ci, h, w) = x.dims4();
    let co = wt.shape()[0];
    let mut out = Tensor::zeros(&[1, co, h, w]);
    for o in 0..co {
        for y in 0..h {
            for xx in 0..w {
                let mut s = b.data()[o];
                for i in 0..ci {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            s += wt.data()[((o * ci + i) * 3 + ky) * 3 + kx] * at(x, i, sy as usize, sx as usize);
                        }
                    }
                }
                out.data_mut()[(o * h + y) * w + xx] = s.max(0.0);
            }
        }
    }
    out
}

pub fn max_pool2(x: &Tensor<f64>) -> Tensor<f64> {
    let (_, c, h, w) = x.dims4();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[1, c, oh, ow]);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(dy, dx)| at(x, ch, 2 * y + dy, 2 * xx + dx))
                    .fold(f64::NEG_INFINITY, f64::max);
                out.data_mut()[(ch * oh + y) * ow + xx] = m;
            }
        }
    }
    out
}
