//! Stereo images, disparity maps and confidence masks; PFM and PNG I/O; the
//! on-disk dataset layout and a synthetic scene generator with analytic
//! disparity and occlusion.
//!
//! Disparity convention: the left pixel `(x, y)` corresponds to the right
//! pixel `(x - d_L(x, y), y)`; the right pixel `(x, y)` corresponds to the
//! left pixel `(x + d_R(x, y), y)`. Stored values are non-negative.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry;
use crate::tensor::{Real, Tensor};

/// Default left-right consistency tolerance in pixels.
pub const DEFAULT_CONSISTENCY_THRESHOLD: f32 = 1.0;

/// RGB image with values in `[0, 1]`, stored planar (channel-major).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    /// `data` is planar `[3, H, W]`.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Argument("image dimensions must be positive".into()));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Argument(format!("image value {v} outside [0, 1]")));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; 3 * height * width])
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

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, 3, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("image tensor shape")
    }

    /// Builds an image from a `[1, 3, H, W]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = t.dims4();
        if n != 1 || c != 3 {
            return Err(Error::Shape(format!("expected [1,3,H,W], got {:?}", t.shape())));
        }
        let data = t.data().iter().map(|v| (v.as_f64() as f32).clamp(0.0, 1.0)).collect();
        Self::new(h, w, data)
    }

    pub fn require_divisible_by_4(&self) -> Result<()> {
        if !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return Err(Error::Argument(format!(
                "image size {}x{} must be divisible by 4",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
            }
        }
        Self::new(h, w, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height, self.width);
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (self.get(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save(path)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum View {
    Left,
    Right,
}

impl View {
    pub fn other(self) -> View {
        match self {
            View::Left => View::Right,
            View::Right => View::Left,
        }
    }

    /// Sign turning a stored (non-negative) disparity into the signed
    /// horizontal offset `o` with `target(x) = source(x - o)`.
    pub fn offset_sign(self) -> f32 {
        match self {
            View::Left => 1.0,
            View::Right => -1.0,
        }
    }
}

/// Horizontal disparity in pixels, defined on the grid of `view`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
    view: View,
}

impl DisparityMap {
    /// Ground-truth style map: finite and non-negative.
    pub fn new(height: usize, width: usize, data: Vec<f32>, view: View) -> Result<Self> {
        let map = Self::unchecked_sign(height, width, data, view)?;
        if let Some(v) = map.data.iter().find(|v| **v < 0.0) {
            return Err(Error::Argument(format!("negative disparity {v}")));
        }
        Ok(map)
    }

    /// Network predictions may be slightly negative; only finiteness is checked.
    pub fn unchecked_sign(height: usize, width: usize, data: Vec<f32>, view: View) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Argument("disparity map dimensions must be positive".into()));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "disparity {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("disparity contains non-finite values".into()));
        }
        Ok(DisparityMap { height, width, data, view })
    }

    pub fn filled(height: usize, width: usize, value: f32, view: View) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], view)
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

    pub fn view(&self) -> View {
        self.view
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Signed offset field `[1, 1, H, W]` used by the warp.
    pub fn offset_tensor<T: Real>(&self) -> Tensor<T> {
        let s = self.view.offset_sign() as f64;
        Tensor::from_vec(
            &[1, 1, self.height, self.width],
            self.data.iter().map(|&d| T::lit(s * d as f64)).collect(),
        )
        .expect("offset shape")
    }
}

/// Binary per-pixel correspondence mask (1 = well matched).
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
    view: View,
}

impl ConfidenceMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>, view: View) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Argument("mask dimensions must be positive".into()));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Argument("mask values must be 0 or 1".into()));
        }
        Ok(ConfidenceMask { height, width, data, view })
    }

    pub fn ones(height: usize, width: usize, view: View) -> Result<Self> {
        Self::new(height, width, vec![1; height * width], view)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn view(&self) -> View {
        self.view
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// `[1, 1, H, W]` tensor of zeros and ones.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, 1, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("mask shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub left: Image,
    pub right: Image,
    pub disp_left: DisparityMap,
    pub disp_right: DisparityMap,
    pub mask_left: ConfidenceMask,
    pub mask_right: ConfidenceMask,
}

impl StereoSample {
    /// Checks shape agreement and view labels across all six fields.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.left.height(), self.left.width());
        let dims = [
            (self.right.height(), self.right.width()),
            (self.disp_left.height(), self.disp_left.width()),
            (self.disp_right.height(), self.disp_right.width()),
            (self.mask_left.height(), self.mask_left.width()),
            (self.mask_right.height(), self.mask_right.width()),
        ];
        if dims.iter().any(|&d| d != (h, w)) {
            return Err(Error::Shape(format!("stereo sample fields disagree on size {h}x{w}")));
        }
        if self.disp_left.view() != View::Left
            || self.disp_right.view() != View::Right
            || self.mask_left.view() != View::Left
            || self.mask_right.view() != View::Right
        {
            return Err(Error::Argument("stereo sample view labels are inconsistent".into()));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.left.height()
    }

    pub fn width(&self) -> usize {
        self.left.width()
    }
}

/// Raw single-channel float map as stored in a PFM file (top row first).
#[derive(Clone, Debug, PartialEq)]
pub struct PfmData {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Reads a single-channel PFM. Rows are stored bottom-up; the scale sign
/// selects endianness (negative = little-endian).
pub fn read_pfm_raw(path: &Path) -> Result<PfmData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let magic = next_token(&bytes, &mut pos).ok_or_else(|| Error::format(path, "missing PFM magic"))?;
    match magic.as_str() {
        "Pf" => {}
        "PF" => return Err(Error::format(path, "three-channel PFM is not a disparity map")),
        other => return Err(Error::format(path, format!("bad PFM magic `{other}`"))),
    }
    let mut num = |what: &str| -> Result<String> {
        next_token(&bytes, &mut pos).ok_or_else(|| Error::format(path, format!("missing {what}")))
    };
    let width: usize = num("width")?.parse().map_err(|_| Error::format(path, "bad width"))?;
    let height: usize = num("height")?.parse().map_err(|_| Error::format(path, "bad height"))?;
    let scale: f32 = num("scale")?.parse().map_err(|_| Error::format(path, "bad scale"))?;
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero PFM dimension"));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(path, "PFM scale must be finite and non-zero"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != 4 * n {
        return Err(Error::format(path, format!("expected {} raster bytes, found {}", 4 * n, raster.len())));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0f32; n];
    for (i, chunk) in raster.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (i / width, i % width);
        data[(height - 1 - row) * width + col] = v;
    }
    Ok(PfmData { height, width, data })
}

/// Writes a single-channel little-endian PFM (scale -1, bottom-up rows).
pub fn write_pfm_raw(height: usize, width: usize, data: &[f32], path: &Path) -> Result<()> {
    if height == 0 || width == 0 || data.len() != height * width {
        return Err(Error::Argument(format!(
            "cannot write a {height}x{width} PFM from {} values",
            data.len()
        )));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(out, "Pf\n{width} {height}\n-1.0\n").map_err(io)?;
    for row in (0..height).rev() {
        for &v in &data[row * width..(row + 1) * width] {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Reads a disparity map; absolute values are taken so the result is non-negative.
pub fn read_pfm(path: &Path, view: View) -> Result<DisparityMap> {
    let raw = read_pfm_raw(path)?;
    if raw.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite disparity"));
    }
    DisparityMap::new(raw.height, raw.width, raw.data.iter().map(|v| v.abs()).collect(), view)
}

pub fn write_pfm(map: &DisparityMap, path: &Path) -> Result<()> {
    write_pfm_raw(map.height(), map.width(), map.data(), path)
}

/// Procedural texture of one scene layer, defined on the whole integer plane.
#[derive(Clone, Debug)]
struct Texture {
    base: [f32; 3],
    tint: [f32; 3],
    freq: (f32, f32),
    phase: f32,
    salt: u64,
}

fn hash3(a: u64, b: i64, c: i64) -> u64 {
    let mut h = a ^ 0x9E37_79B9_7F4A_7C15;
    for v in [b as u64, c as u64] {
        h ^= v.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut c = || [rng.gen_range(0.15..0.85f32), rng.gen_range(0.15..0.85f32), rng.gen_range(0.15..0.85f32)];
        let base = c();
        let tint = c();
        Texture {
            base,
            tint,
            freq: (rng.gen_range(0.2..1.2), rng.gen_range(0.1..0.9)),
            phase: rng.gen_range(0.0..std::f32::consts::TAU),
            salt: rng.gen(),
        }
    }

    /// Colour at integer scene coordinate `(u, y)`, quantized to 8 bits so
    /// PNG round trips are lossless.
    fn sample(&self, c: usize, u: i64, y: i64) -> f32 {
        let wave = (self.freq.0 * u as f32 + self.freq.1 * y as f32 + self.phase).sin();
        let fine = (hash3(self.salt, u, y) % 1024) as f32 / 1023.0 - 0.5;
        let coarse = (hash3(self.salt ^ 0xABCD, u.div_euclid(3), y.div_euclid(3)) % 1024) as f32 / 1023.0 - 0.5;
        let v = self.base[c] + 0.22 * wave * (self.tint[c] - 0.5) * 2.0 + 0.18 * fine + 0.22 * coarse;
        (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
    }
}

/// Scene layer: axis-aligned region in left-view coordinates at a constant disparity.
#[derive(Clone, Debug)]
struct Layer {
    x0: i64,
    x1: i64,
    y0: i64,
    y1: i64,
    disparity: i64,
    texture: Texture,
}

impl Layer {
    fn covers_left(&self, x: i64, y: i64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Renders a random layered scene with integer, piecewise-constant disparity.
///
/// The background and every rectangle get distinct disparity levels spaced
/// two pixels apart, so the left-right consistency rule recovers the exact
/// occlusion masks at the default one-pixel tolerance.
pub fn generate_toy_sample(seed: u64, height: usize, width: usize, max_disparity: f32) -> Result<StereoSample> {
    if height == 0 || width == 0 || !height.is_multiple_of(4) || !width.is_multiple_of(4) {
        return Err(Error::Argument(format!("toy size {height}x{width} must be positive multiples of 4")));
    }
    if !(max_disparity >= 0.0 && max_disparity < width as f32 / 4.0) {
        return Err(Error::Argument(format!(
            "max_disparity {max_disparity} must lie in [0, {})",
            width as f32 / 4.0
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_d = max_disparity.floor() as i64;
    let levels: Vec<i64> = (0..=max_d).step_by(2).collect();
    let (h, w) = (height as i64, width as i64);

    let n_rect = rng.gen_range(2..=5usize);
    let mut layers = Vec::with_capacity(n_rect + 1);
    let (bg_level, rect_levels): (i64, Vec<i64>) = if levels.len() > 1 {
        // background at one of the two farthest levels, rectangles nearer
        let bg_idx = rng.gen_range(0..levels.len().min(2));
        let mut nearer: Vec<i64> = levels[bg_idx + 1..].to_vec();
        nearer.shuffle(&mut rng);
        nearer.truncate(n_rect);
        (levels[bg_idx], nearer)
    } else {
        (0, vec![0; n_rect])
    };
    layers.push(Layer { x0: i64::MIN / 4, x1: i64::MAX / 4, y0: i64::MIN / 4, y1: i64::MAX / 4, disparity: bg_level, texture: Texture::random(&mut rng) });
    for &d in &rect_levels {
        let rw = rng.gen_range(w / 6..=w / 2);
        let rh = rng.gen_range(h / 6..=h / 2);
        let x0 = rng.gen_range(0..=(w - rw));
        let y0 = rng.gen_range(0..=(h - rh));
        layers.push(Layer { x0, x1: x0 + rw, y0, y1: y0 + rh, disparity: d, texture: Texture::random(&mut rng) });
    }
    // nearest (largest disparity) drawn last; ties keep insertion order
    layers.sort_by_key(|l| l.disparity);

    let front_left = |x: i64, y: i64| layers.iter().rposition(|l| l.covers_left(x, y)).expect("background covers all");
    let front_right = |xr: i64, y: i64| {
        layers.iter().rposition(|l| l.covers_left(xr + l.disparity, y)).expect("background covers all")
    };

    let n = height * width;
    let mut left = vec![0.0f32; 3 * n];
    let mut right = vec![0.0f32; 3 * n];
    let mut disp_l = vec![0.0f32; n];
    let mut disp_r = vec![0.0f32; n];
    let mut vis_l = vec![0usize; n];
    let mut vis_r = vec![0usize; n];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            let li = front_left(x, y);
            let ri = front_right(x, y);
            vis_l[i] = li;
            vis_r[i] = ri;
            disp_l[i] = layers[li].disparity as f32;
            disp_r[i] = layers[ri].disparity as f32;
            for c in 0..3 {
                left[c * n + i] = layers[li].texture.sample(c, x, y);
                right[c * n + i] = layers[ri].texture.sample(c, x + layers[ri].disparity, y);
            }
        }
    }
    // a pixel is matched when its partner is in frame and shows the same layer
    let mut mask_l = vec![0u8; n];
    let mut mask_r = vec![0u8; n];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            let xr = x - layers[vis_l[i]].disparity;
            mask_l[i] = (xr >= 0 && vis_r[(y * w + xr) as usize] == vis_l[i]) as u8;
            let xl = x + layers[vis_r[i]].disparity;
            mask_r[i] = (xl < w && vis_l[(y * w + xl) as usize] == vis_r[i]) as u8;
        }
    }
    let sample = StereoSample {
        left: Image::new(height, width, left)?,
        right: Image::new(height, width, right)?,
        disp_left: DisparityMap::new(height, width, disp_l, View::Left)?,
        disp_right: DisparityMap::new(height, width, disp_r, View::Right)?,
        mask_left: ConfidenceMask::new(height, width, mask_l, View::Left)?,
        mask_right: ConfidenceMask::new(height, width, mask_r, View::Right)?,
    };
    sample.validate()?;
    Ok(sample)
}

/// Generates `count` toy samples with seeds `first_seed..first_seed+count`.
pub fn generate_toy_dataset(first_seed: u64, count: usize, height: usize, width: usize, max_disparity: f32) -> Result<Vec<StereoSample>> {
    (0..count as u64).map(|i| generate_toy_sample(first_seed + i, height, width, max_disparity)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

/// Fraction of a flat dataset held out for testing.
pub const TEST_FRACTION: f64 = 0.1;

pub const LAYOUT_DIRS: [&str; 4] = ["left", "right", "disp_left", "disp_right"];

fn sample_path(root: &Path, dir: &str, stem: &str) -> PathBuf {
    let ext = if dir.starts_with("disp") { "pfm" } else { "png" };
    root.join(dir).join(format!("{stem}.{ext}"))
}

/// Writes a sample into the dataset layout under `root`.
pub fn write_sample(root: &Path, stem: &str, sample: &StereoSample) -> Result<()> {
    for dir in LAYOUT_DIRS {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    sample.left.write_png(&sample_path(root, "left", stem))?;
    sample.right.write_png(&sample_path(root, "right", stem))?;
    write_pfm(&sample.disp_left, &sample_path(root, "disp_left", stem))?;
    write_pfm(&sample.disp_right, &sample_path(root, "disp_right", stem))?;
    Ok(())
}

fn read_sample(root: &Path, stem: &str, threshold: f32) -> Result<StereoSample> {
    let left = Image::read_png(&sample_path(root, "left", stem))?;
    let right = Image::read_png(&sample_path(root, "right", stem))?;
    let disp_left = read_pfm(&sample_path(root, "disp_left", stem), View::Left)?;
    let disp_right = read_pfm(&sample_path(root, "disp_right", stem), View::Right)?;
    let mask_left = geometry::build_confidence_mask(&disp_left, &disp_right, threshold)?;
    let mask_right = geometry::build_confidence_mask(&disp_right, &disp_left, threshold)?;
    let s = StereoSample { left, right, disp_left, disp_right, mask_left, mask_right };
    s.validate()?;
    Ok(s)
}

/// Sorted stems of `<root>/left/*.png`.
fn list_stems(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("left");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Loads a dataset in the `left/right/disp_left/disp_right` layout.
///
/// If `<root>/train` or `<root>/test` exist they are used for the matching
/// split; otherwise the last [`TEST_FRACTION`] of the sorted stems forms the
/// test split. Samples with missing or unreadable files are skipped with a
/// warning. Masks are derived from the disparities.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<StereoSample>> {
    load_dataset_with_threshold(root, split, DEFAULT_CONSISTENCY_THRESHOLD)
}

pub fn load_dataset_with_threshold(root: &Path, split: Split, threshold: f32) -> Result<Vec<StereoSample>> {
    let nested = |sub: &str| Some(root.join(sub)).filter(|d| d.join("left").is_dir());
    match split {
        Split::Train | Split::Test => {
            if let Some(d) = nested(if split == Split::Train { "train" } else { "test" }) {
                return load_dataset_with_threshold(&d, Split::All, threshold);
            }
        }
        Split::All if !root.join("left").is_dir() => {
            if let (Some(_), Some(_)) = (nested("train"), nested("test")) {
                let mut all = load_dataset_with_threshold(root, Split::Train, threshold)?;
                all.extend(load_dataset_with_threshold(root, Split::Test, threshold)?);
                return Ok(all);
            }
        }
        Split::All => {}
    }
    let stems = list_stems(root)?;
    let n_test = (stems.len() as f64 * TEST_FRACTION).round() as usize;
    let selected: &[String] = match split {
        Split::All => &stems,
        Split::Train => &stems[..stems.len() - n_test],
        Split::Test => &stems[stems.len() - n_test..],
    };
    let mut samples = Vec::with_capacity(selected.len());
    for stem in selected {
        match read_sample(root, stem, threshold) {
            Ok(s) => samples.push(s),
            Err(e) => warn!("skipping sample `{stem}`: {e}"),
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!("{} ({:?} split)", root.display(), split)));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_negative_scale_is_bottom_up_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pfm");
        // file rows bottom-up: first stored row [1,2] is the image's last row
        let mut bytes = b"Pf\n2 2\n-1.0\n".to_vec();
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, bytes).unwrap();
        let m = read_pfm(&path, View::Left).unwrap();
        assert_eq!(m.data(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn pfm_big_endian_positive_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.pfm");
        let mut bytes = b"Pf\n1 2\n1.0\n".to_vec();
        for v in [5.0f32, -6.0] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        fs::write(&path, bytes).unwrap();
        let m = read_pfm(&path, View::Right).unwrap();
        assert_eq!(m.data(), &[6.0, 5.0]);
    }

    #[test]
    fn pfm_rejects_color_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pfm");
        fs::write(&p, b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_pfm(&p, View::Left), Err(Error::Format { .. })));
        fs::write(&p, b"P6\n1 1\n255\n").unwrap();
        assert!(matches!(read_pfm(&p, View::Left), Err(Error::Format { .. })));
        fs::write(&p, b"Pf\n2 2\n-1.0\n\0\0\0\0").unwrap();
        assert!(matches!(read_pfm(&p, View::Left), Err(Error::Format { .. })));
    }

    #[test]
    fn pfm_constant_round_trip_and_empty_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let m = DisparityMap::filled(4, 4, 1.5, View::Left).unwrap();
        write_pfm(&m, &p).unwrap();
        assert_eq!(read_pfm(&p, View::Left).unwrap(), m);
        assert!(write_pfm_raw(0, 4, &[], &p).is_err());
        assert!(DisparityMap::new(0, 3, vec![], View::Left).is_err());
    }

    #[test]
    fn toy_sample_is_deterministic_and_valid() {
        let a = generate_toy_sample(0, 64, 64, 8.0).unwrap();
        let b = generate_toy_sample(0, 64, 64, 8.0).unwrap();
        assert_eq!(a, b);
        let c = generate_toy_sample(1, 64, 64, 8.0).unwrap();
        assert_ne!(a.left, c.left);
        assert!(a.disp_left.data().iter().all(|&d| d <= 8.0 && d.fract() == 0.0));
    }

    #[test]
    fn toy_zero_disparity_gives_identical_views() {
        let s = generate_toy_sample(4, 32, 32, 0.0).unwrap();
        assert_eq!(s.left, s.right);
        assert_eq!(s.mask_left.count(), 32 * 32);
        assert_eq!(s.mask_right.count(), 32 * 32);
    }

    #[test]
    fn toy_rejects_large_disparity_and_bad_size() {
        assert!(generate_toy_sample(0, 64, 64, 16.0).is_err());
        assert!(generate_toy_sample(0, 62, 64, 4.0).is_err());
    }

    #[test]
    fn toy_reprojection_is_exact_on_mask() {
        for seed in 0..5 {
            let s = generate_toy_sample(seed, 64, 64, 8.0).unwrap();
            for y in 0..64 {
                for x in 0..64 {
                    if s.mask_left.get(y, x) == 1 {
                        let xr = x - s.disp_left.get(y, x) as usize;
                        for c in 0..3 {
                            assert_eq!(s.left.get(c, y, x), s.right.get(c, y, xr));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_split_and_fault_isolation() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..10u64 {
            let s = generate_toy_sample(i, 16, 16, 2.0).unwrap();
            write_sample(dir.path(), &format!("{i:04}"), &s).unwrap();
        }
        assert_eq!(load_dataset(dir.path(), Split::All).unwrap().len(), 10);
        assert_eq!(load_dataset(dir.path(), Split::Test).unwrap().len(), 1);
        assert_eq!(load_dataset(dir.path(), Split::Train).unwrap().len(), 9);
        fs::write(dir.path().join("disp_left/0003.pfm"), b"garbage").unwrap();
        fs::remove_file(dir.path().join("disp_right/0005.pfm")).unwrap();
        let all = load_dataset(dir.path(), Split::All).unwrap();
        assert_eq!(all.len(), 8);
        // the loaded pair matches the generated one bit-exactly
        let first = generate_toy_sample(0, 16, 16, 2.0).unwrap();
        assert_eq!(all[0], first);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("left")).unwrap();
        assert!(matches!(load_dataset(dir.path(), Split::All), Err(Error::EmptyDataset(_))));
    }
}
