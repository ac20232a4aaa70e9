//! Dataset-level metrics (MVL, MSL, MCL), ablation tables and visual exports.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::view_inconsistency_map;
use crate::losses::{content_loss_node, image_view_loss, style_loss_node, PerceptualConfig, StyleTarget, Vgg16};
use crate::nn::Graph;
use crate::stereo_data::{write_pfm_raw, Image, StereoSample};
use crate::stylizer::{stylize_pair_with_tap, StylizeResult, StylizerWeights};
use crate::tensor::Tensor;
use crate::trainer::{style_id, Checkpoint, ContentCache, StylizerTrainer, TrainConfig, Variant};

/// Upper end of the false-color scale for inconsistency maps, shared by every
/// exported map so that maps of different models are comparable.
pub const INCONSISTENCY_VMAX: f32 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub variant: String,
    pub style_id: String,
    pub mvl: f64,
    pub msl: f64,
    pub mcl: f64,
    pub n_samples: usize,
}

impl MetricReport {
    pub const HEADER: &'static str = "variant\tstyle\tmvl\tmsl\tmcl\tn";

    /// `variant style mvl msl mcl n`, tab separated; numbers round-trip exactly.
    pub fn to_row(&self) -> String {
        format!("{}\t{}\t{:e}\t{:e}\t{:e}\t{}", self.variant, self.style_id, self.mvl, self.msl, self.mcl, self.n_samples)
    }

    pub fn from_row(row: &str) -> Result<Self> {
        let f: Vec<&str> = row.trim_end().split('\t').collect();
        let bad = || Error::Argument(format!("malformed metric row `{row}`"));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(MetricReport {
            variant: f[0].to_string(),
            style_id: f[1].to_string(),
            mvl: num(f[2])?,
            msl: num(f[3])?,
            mcl: num(f[4])?,
            n_samples: f[5].parse().map_err(|_| bad())?,
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_row())
    }
}

/// Header plus one row per report.
pub fn format_table(reports: &[MetricReport]) -> String {
    let mut s = String::from(MetricReport::HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.to_row());
        s.push('\n');
    }
    s
}

/// Per-sample metric values; `style` and `content` average the two views.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub view: f64,
    pub style: f64,
    pub content: f64,
}

/// Evaluation context shared across models: extractor and style statistics.
pub struct Evaluator {
    vgg: Arc<Vgg16<f32>>,
    perceptual: PerceptualConfig,
    style: StyleTarget<f32>,
    style_id: String,
}

impl Evaluator {
    pub fn new(vgg: Arc<Vgg16<f32>>, style_image: &Image) -> Result<Self> {
        let perceptual = PerceptualConfig::default();
        let style = StyleTarget::new(&vgg, &style_image.to_tensor(), &perceptual.style_layers)?;
        Ok(Evaluator { vgg, perceptual, style, style_id: style_id(style_image) })
    }

    pub fn style_id(&self) -> &str {
        &self.style_id
    }

    pub fn sample_metrics(&self, sample: &StereoSample, result: &StylizeResult) -> Result<SampleMetrics> {
        let view = image_view_loss(
            &result.styl_left,
            &result.styl_right,
            &sample.disp_left,
            &sample.disp_right,
            &sample.mask_left,
            &sample.mask_right,
        )?;
        let content_refs: Vec<&str> = self.perceptual.content_layers.iter().map(String::as_str).collect();
        let style_refs: Vec<&str> = self.perceptual.style_layers.iter().map(String::as_str).collect();
        let mut all: Vec<&str> = content_refs.clone();
        all.extend(style_refs.iter().filter(|l| !content_refs.contains(l)));
        let (mut style, mut content) = (0.0, 0.0);
        for (x, x_hat) in [(&sample.left, &result.styl_left), (&sample.right, &result.styl_right)] {
            let targets = self.vgg.feature_tensors(&x.to_tensor(), &content_refs)?;
            let targets: Vec<Tensor<f32>> = content_refs.iter().map(|l| targets[*l].clone()).collect();
            let mut g = Graph::new();
            let xi = g.constant(x_hat.to_tensor());
            let f = self.vgg.features_node(&mut g, xi, &all)?;
            let hats: Vec<_> = content_refs.iter().map(|l| f[*l]).collect();
            let c = content_loss_node(&mut g, &targets, &hats)?;
            let hats: Vec<_> = style_refs.iter().map(|l| f[*l]).collect();
            let s = style_loss_node(&mut g, &self.style.grams, &hats)?;
            content += 0.5 * g.value(c).data()[0] as f64;
            style += 0.5 * g.value(s).data()[0] as f64;
        }
        Ok(SampleMetrics { view, style, content })
    }

    /// Per-sample metrics of a model over a dataset, in dataset order.
    pub fn per_sample(&self, weights: &StylizerWeights<f32>, tap: usize, dataset: &[StereoSample]) -> Result<Vec<SampleMetrics>> {
        dataset
            .iter()
            .map(|s| {
                let r = stylize_pair_with_tap(weights, &s.left, &s.right, tap)?;
                self.sample_metrics(s, &r)
            })
            .collect()
    }

    pub fn evaluate(&self, ckpt: &Checkpoint, dataset: &[StereoSample]) -> Result<MetricReport> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset("evaluation set".into()));
        }
        let per = self.per_sample(&ckpt.weights, ckpt.config.tap_layer, dataset)?;
        Ok(aggregate(ckpt.config.variant.name(), &self.style_id, &per))
    }
}

/// Means of per-sample metrics, summed in sorted order so that the result
/// does not depend on the order of the samples.
pub fn aggregate(variant: &str, style_id: &str, per: &[SampleMetrics]) -> MetricReport {
    let n = per.len() as f64;
    let mean = |f: fn(&SampleMetrics) -> f64| {
        let mut v: Vec<f64> = per.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / n
    };
    MetricReport {
        variant: variant.to_string(),
        style_id: style_id.to_string(),
        mvl: mean(|m| m.view),
        msl: mean(|m| m.style),
        mcl: mean(|m| m.content),
        n_samples: per.len(),
    }
}

/// MVL, MSL and MCL of a trained model with the built-in extractor.
pub fn evaluate(ckpt: &Checkpoint, dataset: &[StereoSample], style_image: &Image) -> Result<MetricReport> {
    Evaluator::new(Arc::new(ckpt.config.extractor()?), style_image)?.evaluate(ckpt, dataset)
}

/// Trains every variant under the same config and seed and evaluates it.
pub fn run_ablation(
    variants: &[Variant],
    train: &[StereoSample],
    test: &[StereoSample],
    style_image: &Image,
    disparity: &Checkpoint,
    config: &TrainConfig,
) -> Result<Vec<MetricReport>> {
    let vgg = Arc::new(config.extractor()?);
    let content = Arc::new(ContentCache::compute(&vgg, train, &config.loss_config().perceptual.content_layers)?);
    let evaluator = Evaluator::new(vgg.clone(), style_image)?;
    variants
        .iter()
        .map(|&v| {
            let cfg = TrainConfig { variant: v, ..config.clone() };
            let mut t = StylizerTrainer::new(train, style_image, Some(disparity), &cfg, vgg.clone(), Some(content.clone()))?;
            t.run(None)?;
            evaluator.evaluate(&t.checkpoint(), test)
        })
        .collect()
}

/// Jet-like color ramp on `[0, 1]`.
pub fn false_color(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |center: f32| (1.5 - (4.0 * t - center).abs()).clamp(0.0, 1.0);
    let q = |v: f32| (v * 255.0).round() as u8;
    [q(ch(3.0)), q(ch(2.0)), q(ch(1.0))]
}

fn write_rgb(path: &Path, w: usize, h: usize, pixels: Vec<u8>) -> Result<()> {
    image::RgbImage::from_raw(w as u32, h as u32, pixels)
        .expect("buffer size")
        .save(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

fn write_gray(path: &Path, w: usize, h: usize, values: &[f32]) -> Result<()> {
    let px = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::GrayImage::from_raw(w as u32, h as u32, px)
        .expect("buffer size")
        .save(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// Writes `{i:04}_inconsistency.png` (false color, linear on
/// `[0, INCONSISTENCY_VMAX]`) and the raw `{i:04}_inconsistency.pfm` per sample.
pub fn export_inconsistency_maps(ckpt: &Checkpoint, dataset: &[StereoSample], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    for (i, s) in dataset.iter().enumerate() {
        let r = stylize_pair_with_tap(&ckpt.weights, &s.left, &s.right, ckpt.config.tap_layer)?;
        let map = view_inconsistency_map(&r.styl_left, &r.styl_right, &s.disp_left, &s.mask_left)?;
        let (h, w) = (s.height(), s.width());
        let png = out_dir.join(format!("{i:04}_inconsistency.png"));
        write_rgb(&png, w, h, map.iter().flat_map(|&v| false_color(v / INCONSISTENCY_VMAX)).collect())?;
        let pfm = out_dir.join(format!("{i:04}_inconsistency.pfm"));
        write_pfm_raw(h, w, &map, &pfm)?;
        files.push(png);
        files.push(pfm);
    }
    Ok(files)
}

/// Writes `{i:04}_gate_left.png` and `{i:04}_gate_right.png` per sample.
pub fn export_gate_maps(ckpt: &Checkpoint, dataset: &[StereoSample], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if !ckpt.weights.aggregation.uses_disparity() {
        return Err(Error::Argument(format!("variant {} has no gate", ckpt.config.variant)));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    for (i, s) in dataset.iter().enumerate() {
        let r = stylize_pair_with_tap(&ckpt.weights, &s.left, &s.right, ckpt.config.tap_layer)?;
        for (name, gate) in [("left", &r.gate_left), ("right", &r.gate_right)] {
            let gate = gate.as_ref().expect("gated variant");
            let path = out_dir.join(format!("{i:04}_gate_{name}.png"));
            write_gray(&path, gate.width(), gate.height(), gate.data())?;
            files.push(path);
        }
    }
    Ok(files)
}

/// Writes the two stylized views of every sample.
pub fn export_stylized(ckpt: &Checkpoint, dataset: &[StereoSample], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    for (i, s) in dataset.iter().enumerate() {
        let r = stylize_pair_with_tap(&ckpt.weights, &s.left, &s.right, ckpt.config.tap_layer)?;
        for (name, img) in [("left", &r.styl_left), ("right", &r.styl_right)] {
            let path = out_dir.join(format!("{i:04}_{name}.png"));
            img.write_png(&path)?;
            files.push(path);
        }
    }
    Ok(files)
}
