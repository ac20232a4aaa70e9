//! Two-stage training: supervised pretraining of the disparity sub-network,
//! then encoder, gate and decoder training under the perceptual and view
//! losses with the disparity sub-network frozen (or fine-tuned when
//! `freeze_disparity = false`).

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{Container, NamedTensor, TensorRole, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::losses::{total_loss_node, LossConfig, LossReport, PerceptualConfig, StyleTarget, ViewGeometry, ViewLossLevels, Vgg16};
use crate::nn::{Adam, Graph, ParamKind, ParamStore};
use crate::stereo_data::{Image, StereoSample, View, DEFAULT_CONSISTENCY_THRESHOLD};
use crate::stylizer::{disparity_node, forward_pair, Aggregation, Mode, StylizerWeights, DEFAULT_TAP_LAYER, DISPARITY, FEATURE_STRIDE};
use crate::tensor::Tensor;

/// Trained model families compared in the evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Single-image network, perceptual loss only.
    SingleImage,
    /// Single-image network with the image-level view loss.
    SingleImageIv,
    /// Plain feature concatenation with the image-level view loss.
    ConIv,
    /// Warp-gate-concat aggregation with the image-level view loss.
    StereoFaIv,
    /// Warp-gate-concat aggregation with image- and feature-level view losses.
    StereoFaMv,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::SingleImage, Variant::SingleImageIv, Variant::ConIv, Variant::StereoFaIv, Variant::StereoFaMv];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SingleImage => "SingleImage",
            Variant::SingleImageIv => "SingleImage-IV",
            Variant::ConIv => "CON-IV",
            Variant::StereoFaIv => "Stereo-FA-IV",
            Variant::StereoFaMv => "Stereo-FA-MV",
        }
    }

    pub fn aggregation(self) -> Aggregation {
        match self {
            Variant::SingleImage | Variant::SingleImageIv => Aggregation::SingleImage,
            Variant::ConIv => Aggregation::Concat,
            Variant::StereoFaIv | Variant::StereoFaMv => Aggregation::WarpGateConcat,
        }
    }

    pub fn view_levels(self) -> ViewLossLevels {
        match self {
            Variant::SingleImage => ViewLossLevels::None,
            Variant::StereoFaMv => ViewLossLevels::ImageAndFeature,
            _ => ViewLossLevels::Image,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SingleImage" => Ok(Variant::SingleImage),
            "SingleImage-IV" => Ok(Variant::SingleImageIv),
            "CON-IV" => Ok(Variant::ConIv),
            "Stereo-FA-IV" | "W-G-CON-IV" => Ok(Variant::StereoFaIv),
            "Stereo-FA-MV" => Ok(Variant::StereoFaMv),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Training hyperparameters; serialized as flat `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tap_layer: usize,
    pub freeze_disparity: bool,
    pub variant: Variant,
    pub seed: u64,
    pub image_size: (usize, usize),
    /// Epochs of supervised disparity pretraining.
    pub disparity_epochs: usize,
    /// Left-right consistency tolerance used for dataset masks.
    pub consistency_threshold: f32,
    /// Steps between emitted loss records.
    pub log_every: usize,
    /// Extractor weight container; the built-in weights when absent.
    pub extractor: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 500.0,
            lambda: 100.0,
            lr: 1e-3,
            batch_size: 1,
            epochs: 2,
            tap_layer: DEFAULT_TAP_LAYER,
            freeze_disparity: true,
            variant: Variant::StereoFaMv,
            seed: 0,
            image_size: (64, 64),
            disparity_epochs: 5,
            consistency_threshold: DEFAULT_CONSISTENCY_THRESHOLD,
            log_every: 10,
            extractor: None,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "alpha" => c.alpha = parse_num(k, v)?,
                "beta" => c.beta = parse_num(k, v)?,
                "lambda" => c.lambda = parse_num(k, v)?,
                "lr" => c.lr = parse_num(k, v)?,
                "batch_size" => c.batch_size = parse_num(k, v)?,
                "epochs" => c.epochs = parse_num(k, v)?,
                "tap_layer" => c.tap_layer = parse_num(k, v)?,
                "freeze_disparity" => c.freeze_disparity = parse_num(k, v)?,
                "variant" => c.variant = v.parse()?,
                "seed" => c.seed = parse_num(k, v)?,
                "image_size" => {
                    let (h, w) = v
                        .split_once('x')
                        .ok_or_else(|| Error::Config(format!("image_size `{v}` must look like HxW")))?;
                    c.image_size = (parse_num(k, h.trim())?, parse_num(k, w.trim())?);
                }
                "disparity_epochs" => c.disparity_epochs = parse_num(k, v)?,
                "consistency_threshold" => c.consistency_threshold = parse_num(k, v)?,
                "log_every" => c.log_every = parse_num(k, v)?,
                "extractor" => c.extractor = Some(PathBuf::from(v)),
                other => return Err(Error::Config(format!("unknown config key `{other}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("`lr` must be positive, got {}", self.lr)));
        }
        let weights = [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)];
        if let Some((k, v)) = weights.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("`{k}` must be non-negative, got {v}")));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("`batch_size` and `log_every` must be at least 1".into()));
        }
        if self.tap_layer == 0 || self.tap_layer > 10 {
            return Err(Error::Config(format!("`tap_layer` {} outside 1..=10", self.tap_layer)));
        }
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
            return Err(Error::Config(format!("image_size {h}x{w} must be positive multiples of {FEATURE_STRIDE}")));
        }
        if !(self.consistency_threshold >= 0.0) {
            return Err(Error::Config("`consistency_threshold` must be non-negative".into()));
        }
        Ok(())
    }

    /// Canonical text form; [`TrainConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "alpha = {:?}\nbeta = {:?}\nlambda = {:?}\nlr = {:?}\nbatch_size = {}\nepochs = {}\ntap_layer = {}\n\
             freeze_disparity = {}\nvariant = {}\nseed = {}\nimage_size = {}x{}\ndisparity_epochs = {}\n\
             consistency_threshold = {:?}\nlog_every = {}\n",
            self.alpha,
            self.beta,
            self.lambda,
            self.lr,
            self.batch_size,
            self.epochs,
            self.tap_layer,
            self.freeze_disparity,
            self.variant,
            self.seed,
            self.image_size.0,
            self.image_size.1,
            self.disparity_epochs,
            self.consistency_threshold,
            self.log_every,
        );
        if let Some(p) = &self.extractor {
            s.push_str(&format!("extractor = {}\n", p.display()));
        }
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            perceptual: PerceptualConfig { alpha: self.alpha, beta: self.beta, ..PerceptualConfig::default() },
            lambda: self.lambda,
            view_levels: self.variant.view_levels(),
        }
    }

    /// Loads the configured extractor, or the built-in one.
    pub fn extractor(&self) -> Result<Vgg16<f32>> {
        match &self.extractor {
            None => Ok(Vgg16::default()),
            Some(path) => {
                let c = Container::load(path)?;
                let mut store = ParamStore::new();
                for t in c.tensors {
                    store.insert(t.name, t.tensor, ParamKind::Weight);
                }
                Vgg16::from_params(store)
            }
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// What a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointKind {
    Disparity,
    Stylizer,
}

/// Position in the shuffled schedule; the shuffle of epoch `e` is a pure
/// function of `(seed, e)`, so this is the complete sampling state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub weights: StylizerWeights<f32>,
    pub optimizer: Adam<f32>,
    pub step: u64,
    pub config: TrainConfig,
    pub rng_state: RngState,
    pub style_id: String,
    /// Path of the style image the model was trained on, when known.
    pub style_path: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    kind: CheckpointKind,
    variant: String,
    aggregation: Aggregation,
    style_id: String,
    #[serde(default)]
    style_path: Option<String>,
    training_config_hash: String,
    config: String,
    step: u64,
    rng_state: RngState,
    adam: AdamMeta,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

const MOMENT_M: &str = "adam.m.";
const MOMENT_V: &str = "adam.v.";

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let meta = Metadata {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            variant: self.config.variant.name().to_string(),
            aggregation: self.weights.aggregation,
            style_id: self.style_id.clone(),
            style_path: self.style_path.clone(),
            training_config_hash: self.config.hash(),
            config: self.config.to_text(),
            step: self.step,
            rng_state: self.rng_state,
            adam: AdamMeta {
                lr: self.optimizer.lr,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
                step: self.optimizer.step,
            },
        };
        let mut tensors = Vec::new();
        for (name, e) in self.weights.params.iter() {
            let role = match e.kind {
                ParamKind::Weight => TensorRole::Weight,
                ParamKind::Buffer => TensorRole::Buffer,
            };
            tensors.push(NamedTensor { name: name.to_string(), role, tensor: e.value.as_ref().clone() });
        }
        for (name, (m, v)) in &self.optimizer.moments {
            for (prefix, t) in [(MOMENT_M, m), (MOMENT_V, v)] {
                tensors.push(NamedTensor { name: format!("{prefix}{name}"), role: TensorRole::OptimizerState, tensor: t.clone() });
            }
        }
        Container { metadata: serde_json::to_value(meta).expect("metadata serializes"), tensors }
    }

    pub fn from_container(c: Container, path: &Path) -> Result<Self> {
        let meta: Metadata =
            serde_json::from_value(c.metadata).map_err(|e| Error::format(path, format!("checkpoint metadata: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Version { found: meta.format_version, expected: FORMAT_VERSION });
        }
        let config = TrainConfig::parse(&meta.config)?;
        if config.hash() != meta.training_config_hash {
            return Err(Error::format(path, "training config hash mismatch"));
        }
        let mut params = ParamStore::new();
        let mut optimizer = Adam::new(meta.adam.lr);
        optimizer.beta1 = meta.adam.beta1;
        optimizer.beta2 = meta.adam.beta2;
        optimizer.eps = meta.adam.eps;
        optimizer.step = meta.adam.step;
        let mut m_parts: HashMap<String, Tensor<f32>> = HashMap::new();
        let mut v_parts: HashMap<String, Tensor<f32>> = HashMap::new();
        for t in c.tensors {
            match t.role {
                TensorRole::Weight => params.insert(t.name, t.tensor, ParamKind::Weight),
                TensorRole::Buffer => params.insert(t.name, t.tensor, ParamKind::Buffer),
                TensorRole::OptimizerState => {
                    if let Some(n) = t.name.strip_prefix(MOMENT_M) {
                        m_parts.insert(n.to_string(), t.tensor);
                    } else if let Some(n) = t.name.strip_prefix(MOMENT_V) {
                        v_parts.insert(n.to_string(), t.tensor);
                    } else {
                        return Err(Error::format(path, format!("unknown optimizer tensor `{}`", t.name)));
                    }
                }
            }
        }
        for (name, m) in m_parts {
            let v = v_parts.remove(&name).ok_or_else(|| Error::format(path, format!("missing second moment of `{name}`")))?;
            optimizer.moments.insert(name, (m, v));
        }
        if !v_parts.is_empty() {
            return Err(Error::format(path, "unpaired optimizer moments"));
        }
        Ok(Checkpoint {
            kind: meta.kind,
            weights: StylizerWeights { aggregation: meta.aggregation, params },
            optimizer,
            step: meta.step,
            config,
            rng_state: meta.rng_state,
            style_id: meta.style_id,
            style_path: meta.style_path,
        })
    }

    /// Disparity sub-network parameters.
    pub fn disparity_params(&self) -> ParamStore<f32> {
        self.weights.group(DISPARITY)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.to_container().save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_container(Container::load(path)?, path)
}

/// Sample order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn check_dataset(dataset: &[StereoSample], config: &TrainConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    for s in dataset {
        s.validate()?;
        if (s.height(), s.width()) != config.image_size {
            return Err(Error::Argument(format!(
                "sample size {}x{} differs from image_size {}x{}",
                s.height(),
                s.width(),
                config.image_size.0,
                config.image_size.1
            )));
        }
    }
    Ok(())
}

/// Masked L1 between predicted signed offsets and ground truth, averaged
/// over the two views.
fn disparity_loss(g: &mut Graph<f32>, params: &ParamStore<f32>, s: &StereoSample, train: bool) -> Result<crate::autograd::NodeId> {
    let l = g.constant(s.left.to_tensor());
    let r = g.constant(s.right.to_tensor());
    let mut terms = Vec::with_capacity(2);
    for (target, other, disp, mask) in [(l, r, &s.disp_left, &s.mask_left), (r, l, &s.disp_right, &s.mask_right)] {
        let pred = disparity_node(g, params, target, other, train)?;
        let gt = g.constant(disp.offset_tensor());
        let m = g.constant(mask.to_tensor());
        let d = g.tape.sub(pred, gt);
        let d = g.tape.abs(d);
        let d = g.tape.mul(d, m);
        let sum = g.tape.sum(d);
        let count = mask.count().max(1) as f32;
        terms.push(g.tape.scale(sum, 0.5 / count));
    }
    Ok(g.tape.add(terms[0], terms[1]))
}

/// Masked mean absolute disparity error in pixels over both views, eval mode.
pub fn disparity_mae(params: &ParamStore<f32>, samples: &[StereoSample]) -> Result<f64> {
    let mut err = 0.0f64;
    let mut count = 0usize;
    for s in samples {
        for (target, other, gt, mask, view) in
            [(&s.left, &s.right, &s.disp_left, &s.mask_left, View::Left), (&s.right, &s.left, &s.disp_right, &s.mask_right, View::Right)]
        {
            let pred = crate::stylizer::predict_disparity(params, target, other, view)?;
            for ((p, t), m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
                if *m == 1 {
                    err += (p - t).abs() as f64;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyDataset("no masked pixels for disparity error".into()));
    }
    Ok(err / count as f64)
}

/// Per-step record of the disparity pretraining loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisparityRecord {
    pub step: u64,
    pub loss: f64,
}

/// Supervised pretraining of the disparity sub-network.
pub fn pretrain_disparity(dataset: &[StereoSample], config: &TrainConfig) -> Result<Checkpoint> {
    pretrain_disparity_logged(dataset, config, &mut Vec::new())
}

pub fn pretrain_disparity_logged(dataset: &[StereoSample], config: &TrainConfig, log: &mut Vec<DisparityRecord>) -> Result<Checkpoint> {
    config.validate()?;
    check_dataset(dataset, config)?;
    let mut params = StylizerWeights::<f32>::init_disparity(config.seed);
    let mut adam = Adam::new(config.lr);
    let mut step = 0u64;
    for epoch in 0..config.disparity_epochs {
        for batch in epoch_order(config.seed, epoch, dataset.len()).chunks(config.batch_size) {
            step += 1;
            let mut acc: Option<std::collections::BTreeMap<String, Tensor<f32>>> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let mut g = Graph::new();
                let loss = disparity_loss(&mut g, &params, &dataset[i], true)?;
                let value = g.value(loss).data()[0] as f64;
                if !value.is_finite() {
                    return Err(Error::NonFinite { step, detail: format!("disparity loss {value} on sample {i}") });
                }
                batch_loss += value / batch.len() as f64;
                let grads = g.param_grads(&g.tape.backward(loss));
                g.apply_bn_updates(&mut params)?;
                accumulate(&mut acc, grads, batch.len());
            }
            adam.step(&mut params, &acc.unwrap_or_default())?;
            log.push(DisparityRecord { step, loss: batch_loss });
            if step.is_multiple_of(config.log_every as u64) {
                debug!("disparity step {step} loss {batch_loss:.4}");
            }
        }
    }
    let mut weights = StylizerWeights { aggregation: Aggregation::WarpGateConcat, params: ParamStore::new() };
    weights.params.merge(&params);
    Ok(Checkpoint {
        kind: CheckpointKind::Disparity,
        weights,
        optimizer: adam,
        step,
        config: config.clone(),
        rng_state: RngState { seed: config.seed, epoch: config.disparity_epochs, index: 0 },
        style_id: String::new(),
        style_path: None,
    })
}

fn accumulate(acc: &mut Option<std::collections::BTreeMap<String, Tensor<f32>>>, grads: std::collections::BTreeMap<String, Tensor<f32>>, n: usize) {
    let scale = 1.0 / n as f32;
    let grads = grads.into_iter().map(|(k, t)| (k, t.map(|v| v * scale)));
    match acc {
        None => *acc = Some(grads.collect()),
        Some(a) => {
            for (k, t) in grads {
                match a.get_mut(&k) {
                    Some(existing) => existing.add_assign(&t),
                    None => {
                        a.insert(k, t);
                    }
                }
            }
        }
    }
}

/// Content-layer activations of every training input, per view.
pub struct ContentCache {
    layers: Vec<String>,
    entries: Vec<[Vec<Tensor<f32>>; 2]>,
}

impl ContentCache {
    pub fn compute(vgg: &Vgg16<f32>, dataset: &[StereoSample], layers: &[String]) -> Result<Self> {
        let refs: Vec<&str> = layers.iter().map(String::as_str).collect();
        let mut entries = Vec::with_capacity(dataset.len());
        for s in dataset {
            let mut per_view: [Vec<Tensor<f32>>; 2] = [Vec::new(), Vec::new()];
            for (v, img) in [&s.left, &s.right].into_iter().enumerate() {
                let f = vgg.feature_tensors(&img.to_tensor(), &refs)?;
                per_view[v] = refs.iter().map(|l| f[*l].clone()).collect();
            }
            entries.push(per_view);
        }
        Ok(ContentCache { layers: layers.to_vec(), entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Identifies a style image by the hash of its pixels.
pub fn style_id(style: &Image) -> String {
    let mut h = Sha256::new();
    h.update((style.height() as u64).to_le_bytes());
    h.update((style.width() as u64).to_le_bytes());
    for v in style.data() {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize()[..8])
}

/// One emitted loss record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub report: LossReport,
}

impl LogRecord {
    /// `step content style view_img view_feat total`, tab separated.
    pub fn to_line(&self) -> String {
        let r = &self.report;
        format!("{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}", self.step, r.content, r.style, r.view_img, r.view_feat, r.total)
    }
}

/// Stateful second-stage trainer; supports stopping and resuming mid-epoch.
pub struct StylizerTrainer<'a> {
    config: TrainConfig,
    dataset: &'a [StereoSample],
    vgg: Arc<Vgg16<f32>>,
    style: StyleTarget<f32>,
    style_id: String,
    style_path: Option<String>,
    content: Arc<ContentCache>,
    geometry: Vec<Option<ViewGeometry<f32>>>,
    offsets: Vec<Option<(Tensor<f32>, Tensor<f32>)>>,
    weights: StylizerWeights<f32>,
    adam: Adam<f32>,
    step: u64,
    rng_state: RngState,
    records: Vec<LogRecord>,
    sink: Option<Box<dyn Write + 'a>>,
}

impl<'a> StylizerTrainer<'a> {
    /// Fresh trainer. `disparity` supplies pretrained disparity weights and is
    /// required by the warp-gate variants.
    pub fn new(
        dataset: &'a [StereoSample],
        style: &Image,
        disparity: Option<&Checkpoint>,
        config: &TrainConfig,
        vgg: Arc<Vgg16<f32>>,
        content: Option<Arc<ContentCache>>,
    ) -> Result<Self> {
        let mut weights = StylizerWeights::<f32>::init(config.variant.aggregation(), config.seed);
        if weights.aggregation.uses_disparity() {
            let d = disparity.ok_or_else(|| Error::Argument(format!("variant {} needs a disparity checkpoint", config.variant)))?;
            let params = d.disparity_params();
            if params.is_empty() {
                return Err(Error::Argument("disparity checkpoint holds no disparity weights".into()));
            }
            for (name, e) in params.iter() {
                weights.params.set(name, e.value.as_ref().clone())?;
            }
        }
        let start = RngState { seed: config.seed, epoch: 0, index: 0 };
        Self::build(dataset, style, config, vgg, content, weights, Adam::new(config.lr), 0, start)
    }

    /// Continues from a stylizer checkpoint.
    pub fn resume(
        dataset: &'a [StereoSample],
        style: &Image,
        ckpt: &Checkpoint,
        vgg: Arc<Vgg16<f32>>,
        content: Option<Arc<ContentCache>>,
    ) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Stylizer {
            return Err(Error::Argument("cannot resume stylizer training from a disparity checkpoint".into()));
        }
        let id = style_id(style);
        if id != ckpt.style_id {
            return Err(Error::Argument(format!("style {id} differs from checkpoint style {}", ckpt.style_id)));
        }
        let mut t =
            Self::build(dataset, style, &ckpt.config, vgg, content, ckpt.weights.clone(), ckpt.optimizer.clone(), ckpt.step, ckpt.rng_state)?;
        t.style_path = ckpt.style_path.clone();
        Ok(t)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        dataset: &'a [StereoSample],
        style: &Image,
        config: &TrainConfig,
        vgg: Arc<Vgg16<f32>>,
        content: Option<Arc<ContentCache>>,
        weights: StylizerWeights<f32>,
        adam: Adam<f32>,
        step: u64,
        rng_state: RngState,
    ) -> Result<Self> {
        config.validate()?;
        check_dataset(dataset, config)?;
        let loss_cfg = config.loss_config();
        let content = match content {
            Some(c) if c.len() == dataset.len() && c.layers == loss_cfg.perceptual.content_layers => c,
            Some(_) => return Err(Error::Argument("content cache does not match the dataset".into())),
            None => Arc::new(ContentCache::compute(&vgg, dataset, &loss_cfg.perceptual.content_layers)?),
        };
        let style_target = StyleTarget::new(&vgg, &style.to_tensor(), &loss_cfg.perceptual.style_layers)?;
        Ok(StylizerTrainer {
            config: config.clone(),
            dataset,
            vgg,
            style: style_target,
            style_id: style_id(style),
            style_path: None,
            content,
            geometry: vec![None; dataset.len()],
            offsets: vec![None; dataset.len()],
            weights,
            adam,
            step,
            rng_state,
            records: Vec::new(),
            sink: None,
        })
    }

    /// Recorded in checkpoints as the style image location.
    pub fn set_style_path(&mut self, path: impl Into<String>) {
        self.style_path = Some(path.into());
    }

    /// Writes every emitted record as a log line.
    pub fn set_log_sink(&mut self, sink: Box<dyn Write + 'a>) {
        self.sink = Some(sink);
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn weights(&self) -> &StylizerWeights<f32> {
        &self.weights
    }

    pub fn is_finished(&self) -> bool {
        self.rng_state.epoch >= self.config.epochs
    }

    fn geometry(&mut self, i: usize) -> Result<&ViewGeometry<f32>> {
        if self.geometry[i].is_none() {
            let (h, w) = self.config.image_size;
            self.geometry[i] = Some(ViewGeometry::from_sample(&self.dataset[i], h / FEATURE_STRIDE, w / FEATURE_STRIDE)?);
        }
        Ok(self.geometry[i].as_ref().expect("filled"))
    }

    /// Offsets of the frozen disparity sub-network; computed once per sample.
    fn frozen_offsets(&mut self, i: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if self.offsets[i].is_none() {
            let s = &self.dataset[i];
            let mut g = Graph::new();
            let l = g.constant(s.left.to_tensor());
            let r = g.constant(s.right.to_tensor());
            let ol = disparity_node(&mut g, &self.weights.params, l, r, false)?;
            let or = disparity_node(&mut g, &self.weights.params, r, l, false)?;
            self.offsets[i] = Some((g.value(ol).clone(), g.value(or).clone()));
        }
        Ok(self.offsets[i].clone().expect("filled"))
    }

    fn sample_step(&mut self, i: usize) -> Result<(LossReport, std::collections::BTreeMap<String, Tensor<f32>>, Graph<f32>)> {
        let frozen = self.config.freeze_disparity;
        let uses_disp = self.weights.aggregation.uses_disparity();
        let offsets = if uses_disp && frozen { Some(self.frozen_offsets(i)?) } else { None };
        let geometry = self.geometry(i)?.clone();
        let s = &self.dataset[i];
        let mode = Mode { train: true, train_disparity: !frozen };
        let mut g = Graph::new();
        let l = g.constant(s.left.to_tensor());
        let r = g.constant(s.right.to_tensor());
        let off_nodes = offsets.map(|(a, b)| (g.constant(a), g.constant(b)));
        let paths = forward_pair(&mut g, &self.weights, l, r, off_nodes, self.config.tap_layer, mode)?;
        let loss_cfg = self.config.loss_config();
        let nodes = total_loss_node(
            &mut g,
            &self.vgg,
            &loss_cfg,
            [paths[0].image, paths[1].image],
            [paths[0].tap, paths[1].tap],
            &self.content.entries[i],
            &self.style,
            &geometry,
        )?;
        let report = nodes.report(&g);
        if !report.all_finite() {
            return Err(Error::NonFinite {
                step: self.step + 1,
                detail: format!(
                    "sample {i}: content {} style {} view_img {} view_feat {} total {}",
                    report.content, report.style, report.view_img, report.view_feat, report.total
                ),
            });
        }
        let grads = g.param_grads(&g.tape.backward(nodes.total));
        Ok((report, grads, g))
    }

    /// Runs until training finishes or `max_steps` further steps were taken.
    pub fn run(&mut self, max_steps: Option<u64>) -> Result<()> {
        let n = self.dataset.len();
        let mut taken = 0u64;
        while !self.is_finished() {
            if max_steps.is_some_and(|m| taken >= m) {
                return Ok(());
            }
            let order = epoch_order(self.rng_state.seed, self.rng_state.epoch, n);
            let start = self.rng_state.index;
            let end = (start + self.config.batch_size).min(n);
            let mut acc = None;
            let mut report = LossReport::default();
            let count = end - start;
            for &i in &order[start..end] {
                let (r, grads, g) = self.sample_step(i)?;
                g.apply_bn_updates(&mut self.weights.params)?;
                accumulate(&mut acc, grads, count);
                let w = 1.0 / count as f64;
                report.content += w * r.content;
                report.style += w * r.style;
                report.view_img += w * r.view_img;
                report.view_feat += w * r.view_feat;
                report.total += w * r.total;
            }
            self.adam.step(&mut self.weights.params, &acc.unwrap_or_default())?;
            self.step += 1;
            taken += 1;
            self.rng_state.index = end;
            if end == n {
                self.rng_state.epoch += 1;
                self.rng_state.index = 0;
            }
            if self.step.is_multiple_of(self.config.log_every as u64) {
                let rec = LogRecord { step: self.step, report };
                if let Some(sink) = self.sink.as_mut() {
                    writeln!(sink, "{}", rec.to_line()).map_err(|e| Error::io("training log", e))?;
                }
                debug!("{}", rec.to_line());
                self.records.push(rec);
            }
        }
        info!("{} training finished after {} steps", self.config.variant, self.step);
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Stylizer,
            weights: self.weights.clone(),
            optimizer: self.adam.clone(),
            step: self.step,
            config: self.config.clone(),
            rng_state: self.rng_state,
            style_id: self.style_id.clone(),
            style_path: self.style_path.clone(),
        }
    }
}

/// Trains encoder, gate and decoder with the built-in extractor.
pub fn train_stylizer(dataset: &[StereoSample], style_image: &Image, disparity_ckpt: Option<&Checkpoint>, config: &TrainConfig) -> Result<Checkpoint> {
    let vgg = Arc::new(config.extractor()?);
    let mut t = StylizerTrainer::new(dataset, style_image, disparity_ckpt, config, vgg, None)?;
    t.run(None)?;
    Ok(t.checkpoint())
}
