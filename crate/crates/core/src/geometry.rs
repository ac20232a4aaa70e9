//! Horizontal disparity warping, resizing of images, disparities and masks,
//! left-right consistency masks and view inconsistency maps.
//!
//! Sampling follows the align-corners=false pixel-centre convention
//! everywhere. A disparity map defined on view `v` warps the other view onto
//! `v`: a left map samples the source at `x - d`, a right map at `x + d`.

use crate::autograd::{resize_axis, warp_site};
use crate::error::{Error, Result};
use crate::stereo_data::{ConfidenceMask, DisparityMap, Image};
use crate::tensor::Tensor;

/// `C x H x W` activation map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Argument("feature map dimensions must be positive".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("feature map contains non-finite values".into()));
        }
        Ok(FeatureMap { channels, height, width, data })
    }

    /// Takes a `[1, C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        if t.shape().len() != 4 || t.shape()[0] != 1 {
            return Err(Error::Shape(format!("expected [1,C,H,W], got {:?}", t.shape())));
        }
        let (_, c, h, w) = t.dims4();
        Self::new(c, h, w, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, self.channels, self.height, self.width], self.data.clone()).expect("feature shape")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

impl From<&Image> for FeatureMap {
    fn from(img: &Image) -> Self {
        FeatureMap { channels: 3, height: img.height(), width: img.width(), data: img.data().to_vec() }
    }
}

/// Single-channel gate in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GateMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!("gate map {height}x{width} with {} values", data.len())));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Argument("gate values must lie in [0, 1]".into()));
        }
        Ok(GateMap { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpOutput {
    pub warped: FeatureMap,
    /// `H x W`, 1 where the sample fell inside the source.
    pub valid: Vec<u8>,
}

/// Warps `src` onto the grid of `disp.view()`.
pub fn warp_horizontal(src: &FeatureMap, disp: &DisparityMap) -> Result<WarpOutput> {
    let (c, h, w) = (src.channels, src.height, src.width);
    if disp.height() != h || disp.width() != w {
        return Err(Error::Argument(format!(
            "warp: source {h}x{w} vs disparity {}x{}",
            disp.height(),
            disp.width()
        )));
    }
    let sign = disp.view().offset_sign();
    let mut out = vec![0.0f32; c * h * w];
    let mut valid = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let Some((x0, a)) = warp_site(x, sign * disp.get(y, x), w) else {
                continue;
            };
            valid[y * w + x] = 1;
            for ch in 0..c {
                let row = (ch * h + y) * w;
                let v0 = src.data[row + x0];
                out[row + x] = if a > 0.0 { (1.0 - a) * v0 + a * src.data[row + x0 + 1] } else { v0 };
            }
        }
    }
    Ok(WarpOutput { warped: FeatureMap { channels: c, height: h, width: w, data: out }, valid })
}

/// Image convenience wrapper around [`warp_horizontal`]; invalid pixels are 0.
pub fn warp_image(src: &Image, disp: &DisparityMap) -> Result<(Image, Vec<u8>)> {
    let out = warp_horizontal(&FeatureMap::from(src), disp)?;
    let img = Image::new(src.height(), src.width(), out.warped.data)?;
    Ok((img, out.valid))
}

fn resize_plane(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let ys = resize_axis(h, out_h);
    let xs = resize_axis(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let (fx, fy) = (fx as f32, fy as f32);
            let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
            let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
            out.push((1.0 - fy) * top + fy * bot);
        }
    }
    out
}

fn check_target(target_h: usize, target_w: usize) -> Result<()> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::Argument(format!("resize target {target_h}x{target_w} must be positive")));
    }
    Ok(())
}

/// Bilinear resize with values scaled by `target_w / source_w`.
pub fn scale_disparity(disp: &DisparityMap, target_h: usize, target_w: usize) -> Result<DisparityMap> {
    check_target(target_h, target_w)?;
    if (target_h, target_w) == (disp.height(), disp.width()) {
        return Ok(disp.clone());
    }
    let factor = target_w as f32 / disp.width() as f32;
    let data = resize_plane(disp.data(), disp.height(), disp.width(), target_h, target_w)
        .into_iter()
        .map(|v| v * factor)
        .collect();
    DisparityMap::unchecked_sign(target_h, target_w, data, disp.view())
}

pub fn resize_bilinear(img: &Image, target_h: usize, target_w: usize) -> Result<Image> {
    check_target(target_h, target_w)?;
    if (target_h, target_w) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(3 * target_h * target_w);
    for c in 0..3 {
        let plane = &img.data()[c * h * w..(c + 1) * h * w];
        data.extend(resize_plane(plane, h, w, target_h, target_w).into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Image::new(target_h, target_w, data)
}

/// Nearest-neighbour resize: output `(i, j)` reads input `(floor(i*H/h), floor(j*W/w))`.
pub fn resize_mask_nearest(mask: &ConfidenceMask, target_h: usize, target_w: usize) -> Result<ConfidenceMask> {
    check_target(target_h, target_w)?;
    let (h, w) = (mask.height(), mask.width());
    let mut data = Vec::with_capacity(target_h * target_w);
    for i in 0..target_h {
        let sy = i * h / target_h;
        for j in 0..target_w {
            data.push(mask.get(sy, j * w / target_w));
        }
    }
    ConfidenceMask::new(target_h, target_w, data, mask.view())
}

/// Left-right consistency: `mask(y, x) = 1` iff the partner position lies in
/// frame and the partner's disparity, sampled bilinearly, agrees within
/// `threshold_px`.
pub fn build_confidence_mask(disp_a: &DisparityMap, disp_b: &DisparityMap, threshold_px: f32) -> Result<ConfidenceMask> {
    let (h, w) = (disp_a.height(), disp_a.width());
    if disp_b.height() != h || disp_b.width() != w {
        return Err(Error::Argument("confidence mask: disparity shapes differ".into()));
    }
    if disp_a.view() == disp_b.view() {
        return Err(Error::Argument("confidence mask needs maps of opposite views".into()));
    }
    if !(threshold_px >= 0.0) {
        return Err(Error::Argument(format!("threshold {threshold_px} must be non-negative")));
    }
    let sign = disp_a.view().offset_sign();
    let mut data = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = disp_a.get(y, x);
            let Some((x0, a)) = warp_site(x, sign * d, w) else {
                continue;
            };
            let b0 = disp_b.get(y, x0);
            let partner = if a > 0.0 { (1.0 - a) * b0 + a * disp_b.get(y, x0 + 1) } else { b0 };
            data[y * w + x] = ((d - partner).abs() <= threshold_px) as u8;
        }
    }
    ConfidenceMask::new(h, w, data, disp_a.view())
}

/// `V(y, x) = mask(y, x) * sum_c |left_c(y, x) - W(right)_c(y, x)|`, warping
/// with the ground-truth left disparity.
pub fn view_inconsistency_map(
    styl_left: &Image,
    styl_right: &Image,
    gt_disp_left: &DisparityMap,
    mask_left: &ConfidenceMask,
) -> Result<Vec<f32>> {
    let (h, w) = (styl_left.height(), styl_left.width());
    let same = |hh: usize, ww: usize| hh == h && ww == w;
    if !same(styl_right.height(), styl_right.width())
        || !same(gt_disp_left.height(), gt_disp_left.width())
        || !same(mask_left.height(), mask_left.width())
    {
        return Err(Error::Argument("inconsistency map: shapes disagree".into()));
    }
    let warped = warp_horizontal(&FeatureMap::from(styl_right), gt_disp_left)?.warped;
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask_left.get(y, x) == 0 {
                continue;
            }
            out[y * w + x] = (0..3).map(|c| (styl_left.get(c, y, x) - warped.get(c, y, x)).abs()).sum();
        }
    }
    Ok(out)
}

/// Signed warp offset for a disparity map: `+d` for left, `-d` for right.
pub fn signed_offset(disp: &DisparityMap) -> Tensor<f32> {
    disp.offset_tensor()
}
