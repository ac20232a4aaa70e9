//! Loss network and training objectives: a frozen VGG-16 feature extractor,
//! content and style losses, image- and feature-level view losses and the
//! weighted total.
//!
//! Every loss is built on an autograd [`Graph`]; the plain functions evaluate
//! the same graphs on constants.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::NodeId;
use crate::error::{Error, Result};
use crate::geometry::{resize_mask_nearest, scale_disparity, FeatureMap};
use crate::nn::{Graph, ParamKind, ParamStore, Scope};
use crate::stereo_data::{ConfidenceMask, DisparityMap, Image, StereoSample};
use crate::tensor::{Real, Tensor};

/// `(name, c_in, c_out)` of each VGG-16 convolution up to `conv4_3`; a 2x2
/// max pool follows `conv1_2`, `conv2_2` and `conv3_3`.
pub const VGG_CONVS: [(&str, usize, usize); 10] = [
    ("conv1_1", 3, 64),
    ("conv1_2", 64, 64),
    ("conv2_1", 64, 128),
    ("conv2_2", 128, 128),
    ("conv3_1", 128, 256),
    ("conv3_2", 256, 256),
    ("conv3_3", 256, 256),
    ("conv4_1", 256, 512),
    ("conv4_2", 512, 512),
    ("conv4_3", 512, 512),
];

const POOL_AFTER: [&str; 3] = ["conv1_2", "conv2_2", "conv3_3"];

/// Channel statistics of the classifier's training images.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Seed of the built-in extractor weights, shared by every run.
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5647_4731;

pub const DEFAULT_CONTENT_LAYERS: [&str; 1] = ["relu3_3"];
pub const DEFAULT_STYLE_LAYERS: [&str; 4] = ["relu1_2", "relu2_2", "relu3_3", "relu4_3"];

fn relu_name(conv: &str) -> String {
    conv.replacen("conv", "relu", 1)
}

/// Names of the extractor's activation layers in forward order.
pub fn layer_names() -> Vec<String> {
    VGG_CONVS.iter().map(|(n, _, _)| relu_name(n)).collect()
}

/// Frozen VGG-16 trunk up to `relu4_3` (3x3 convolutions, zero padding 1).
#[derive(Clone, Debug)]
pub struct Vgg16<T = f32> {
    params: ParamStore<T>,
}

impl<T: Real> PartialEq for Vgg16<T> {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl<T: Real> Vgg16<T> {
    /// Deterministic He-uniform weights and zero biases.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, ci, co) in VGG_CONVS {
            let limit = (6.0 / (ci * 9) as f64).sqrt();
            let data = (0..co * ci * 9).map(|_| T::lit(rng.gen_range(-limit..limit))).collect();
            params.insert(format!("vgg.{name}.weight"), Tensor::from_vec(&[co, ci, 3, 3], data).expect("shape"), ParamKind::Weight);
            params.insert(format!("vgg.{name}.bias"), Tensor::zeros(&[co]), ParamKind::Weight);
        }
        Vgg16 { params }
    }

    /// Wraps externally supplied weights after checking every shape.
    pub fn from_params(params: ParamStore<T>) -> Result<Self> {
        for (name, ci, co) in VGG_CONVS {
            let w = params.get(&format!("vgg.{name}.weight"))?;
            let b = params.get(&format!("vgg.{name}.bias"))?;
            if w.shape() != [co, ci, 3, 3] || b.shape() != [co] {
                return Err(Error::Shape(format!("extractor layer {name} has shape {:?}", w.shape())));
            }
        }
        Ok(Vgg16 { params })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn cast<U: Real>(&self) -> Vgg16<U> {
        Vgg16 { params: self.params.cast() }
    }

    /// Activations at `layers` for the `[N,3,H,W]` image node `x` in `[0,1]`.
    /// The forward pass stops at the deepest requested layer.
    pub fn features_node(&self, g: &mut Graph<T>, x: NodeId, layers: &[&str]) -> Result<BTreeMap<String, NodeId>> {
        let names = layer_names();
        let mut deepest = 0;
        for l in layers {
            let idx = names
                .iter()
                .position(|n| n == l)
                .ok_or_else(|| Error::Argument(format!("unknown extractor layer `{l}`")))?;
            deepest = deepest.max(idx);
        }
        let scale: Vec<T> = IMAGENET_STD.iter().map(|s| T::lit(1.0 / s)).collect();
        let shift: Vec<T> = IMAGENET_MEAN.iter().zip(IMAGENET_STD).map(|(m, s)| T::lit(-m / s)).collect();
        let mut h = g.tape.channel_affine(x, &scale, &shift);
        let scope = Scope::new(&self.params, "vgg", false, false);
        let mut out = BTreeMap::new();
        for (i, (name, _, _)) in VGG_CONVS.iter().enumerate().take(deepest + 1) {
            let s = scope.sub(name);
            let w = s.param(g, "weight")?;
            let b = s.param(g, "bias")?;
            h = g.tape.conv2d(h, w, Some(b), 1, 1);
            h = g.tape.relu(h);
            let relu = relu_name(name);
            if layers.contains(&relu.as_str()) {
                out.insert(relu, h);
            }
            if POOL_AFTER.contains(name) && i < deepest {
                h = g.tape.max_pool2(h);
            }
        }
        Ok(out)
    }

    /// Activation tensors `[1,C,H,W]` of `x` at `layers`.
    pub fn feature_tensors(&self, x: &Tensor<T>, layers: &[&str]) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let nodes = self.features_node(&mut g, xi, layers)?;
        Ok(nodes.into_iter().map(|(k, id)| (k, g.value(id).clone())).collect())
    }
}

impl Vgg16<f32> {
    pub fn extract_features(&self, x: &Image, layers: &[&str]) -> Result<BTreeMap<String, FeatureMap>> {
        self.feature_tensors(&x.to_tensor(), layers)?
            .into_iter()
            .map(|(k, t)| Ok((k, FeatureMap::from_tensor(&t)?)))
            .collect()
    }
}

impl Default for Vgg16<f32> {
    fn default() -> Self {
        Self::random(DEFAULT_EXTRACTOR_SEED)
    }
}

/// Layer selection and perceptual trade-off weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualConfig {
    pub content_layers: Vec<String>,
    pub style_layers: Vec<String>,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            content_layers: DEFAULT_CONTENT_LAYERS.iter().map(|s| s.to_string()).collect(),
            style_layers: DEFAULT_STYLE_LAYERS.iter().map(|s| s.to_string()).collect(),
            alpha: 1.0,
            beta: 500.0,
        }
    }
}

impl PerceptualConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config(format!("alpha {} and beta {} must be positive", self.alpha, self.beta)));
        }
        let names = layer_names();
        for l in self.content_layers.iter().chain(&self.style_layers) {
            if !names.contains(l) {
                return Err(Error::Config(format!("unknown extractor layer `{l}`")));
            }
        }
        Ok(())
    }

    fn content_refs(&self) -> Vec<&str> {
        self.content_layers.iter().map(String::as_str).collect()
    }

    fn style_refs(&self) -> Vec<&str> {
        self.style_layers.iter().map(String::as_str).collect()
    }

    /// Union of content and style layers.
    pub fn all_layers(&self) -> Vec<&str> {
        let mut v = self.content_refs();
        for l in self.style_refs() {
            if !v.contains(&l) {
                v.push(l);
            }
        }
        v
    }
}

/// `G = F F^T / (H W)` per batch item, `[N, C, C]`.
pub fn gram<T: Real>(feat: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let f = g.constant(feat.clone());
    let out = g.tape.gram(f);
    g.value(out).clone()
}

fn sum_sq_diff<T: Real>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> NodeId {
    let d = g.tape.sub(a, b);
    let s = g.tape.square(d);
    g.tape.sum(s)
}

fn add_all<T: Real>(g: &mut Graph<T>, terms: &[NodeId]) -> NodeId {
    match terms.split_first() {
        None => g.constant(Tensor::scalar(T::zero())),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &t| g.tape.add(acc, t)),
    }
}

/// `sum_l ||F_l(x) - F_l(x_hat)||^2 / (C H W)` against constant targets.
pub fn content_loss_node<T: Real>(g: &mut Graph<T>, targets: &[Tensor<T>], hats: &[NodeId]) -> Result<NodeId> {
    if targets.len() != hats.len() {
        return Err(Error::Argument("content loss: layer count mismatch".into()));
    }
    let mut terms = Vec::with_capacity(targets.len());
    for (t, &h) in targets.iter().zip(hats) {
        if t.shape() != g.value(h).shape() {
            return Err(Error::Argument(format!("content loss: {:?} vs {:?}", t.shape(), g.value(h).shape())));
        }
        let n = t.numel() as f64;
        let tn = g.constant(t.clone());
        let s = sum_sq_diff(g, h, tn);
        terms.push(g.tape.scale(s, T::lit(1.0 / n)));
    }
    Ok(add_all(g, &terms))
}

/// `sum_l ||G_l(s) - G_l(x_hat)||^2 / C_l^2` against precomputed style Grams.
pub fn style_loss_node<T: Real>(g: &mut Graph<T>, style_grams: &[Tensor<T>], hats: &[NodeId]) -> Result<NodeId> {
    if style_grams.len() != hats.len() {
        return Err(Error::Argument("style loss: layer count mismatch".into()));
    }
    let mut terms = Vec::with_capacity(hats.len());
    for (sg, &h) in style_grams.iter().zip(hats) {
        let gh = g.tape.gram(h);
        if sg.shape() != g.value(gh).shape() {
            return Err(Error::Argument(format!("style loss: Gram {:?} vs {:?}", sg.shape(), g.value(gh).shape())));
        }
        let c = sg.shape()[1] as f64;
        let sn = g.constant(sg.clone());
        let s = sum_sq_diff(g, gh, sn);
        terms.push(g.tape.scale(s, T::lit(1.0 / (c * c))));
    }
    Ok(add_all(g, &terms))
}

/// `(1 / sum M) * ||M * (a - W(b))||^2`, warping `b` by the signed offset.
/// An empty mask contributes 0.
pub fn masked_view_term<T: Real>(g: &mut Graph<T>, a: NodeId, b: NodeId, offset: &Tensor<T>, mask: &Tensor<T>) -> Result<NodeId> {
    let (n, _, h, w) = g.value(a).dims4();
    if g.value(a).shape() != g.value(b).shape() || offset.shape() != [n, 1, h, w] || mask.shape() != [n, 1, h, w] {
        return Err(Error::Argument("view loss: shapes disagree".into()));
    }
    let count = mask.sum();
    if count <= T::zero() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let off = g.constant(offset.clone());
    let m = g.constant(mask.clone());
    let warped = g.tape.warp(b, off);
    let d = g.tape.sub(a, warped);
    let d = g.tape.mul_bcast(d, m);
    let s = g.tape.square(d);
    let s = g.tape.sum(s);
    Ok(g.tape.scale(s, T::one() / count))
}

/// Signed ground-truth offsets and masks of one view at one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTargets<T> {
    pub offset: Tensor<T>,
    pub mask: Tensor<T>,
}

/// Ground-truth warp data for both views at image and feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewGeometry<T> {
    pub image: [ViewTargets<T>; 2],
    pub feature: [ViewTargets<T>; 2],
}

fn targets<T: Real>(disp: &DisparityMap, mask: &ConfidenceMask) -> ViewTargets<T> {
    ViewTargets { offset: disp.offset_tensor(), mask: mask.to_tensor() }
}

impl<T: Real> ViewGeometry<T> {
    pub fn new(
        disp_left: &DisparityMap,
        disp_right: &DisparityMap,
        mask_left: &ConfidenceMask,
        mask_right: &ConfidenceMask,
        feat_h: usize,
        feat_w: usize,
    ) -> Result<Self> {
        let small = |d: &DisparityMap, m: &ConfidenceMask| -> Result<ViewTargets<T>> {
            Ok(targets(&scale_disparity(d, feat_h, feat_w)?, &resize_mask_nearest(m, feat_h, feat_w)?))
        };
        Ok(ViewGeometry {
            image: [targets(disp_left, mask_left), targets(disp_right, mask_right)],
            feature: [small(disp_left, mask_left)?, small(disp_right, mask_right)?],
        })
    }

    pub fn from_sample(sample: &StereoSample, feat_h: usize, feat_w: usize) -> Result<Self> {
        Self::new(&sample.disp_left, &sample.disp_right, &sample.mask_left, &sample.mask_right, feat_h, feat_w)
    }
}

/// Bidirectional masked view loss between `[left, right]` nodes.
pub fn view_loss_node<T: Real>(g: &mut Graph<T>, nodes: [NodeId; 2], targets: &[ViewTargets<T>; 2]) -> Result<NodeId> {
    let l = masked_view_term(g, nodes[0], nodes[1], &targets[0].offset, &targets[0].mask)?;
    let r = masked_view_term(g, nodes[1], nodes[0], &targets[1].offset, &targets[1].mask)?;
    Ok(g.tape.add(l, r))
}

fn f64_node(g: &mut Graph<f64>, data: &[f32], shape: &[usize]) -> NodeId {
    g.constant(Tensor::from_vec(shape, data.iter().map(|&v| v as f64).collect()).expect("shape"))
}

fn check_same(a: (usize, usize), others: &[(usize, usize)], what: &str) -> Result<()> {
    if others.iter().any(|&o| o != a) {
        return Err(Error::Argument(format!("{what}: shapes disagree")));
    }
    Ok(())
}

/// Image-level view loss evaluated in double precision.
pub fn image_view_loss(
    styl_left: &Image,
    styl_right: &Image,
    gt_disp_left: &DisparityMap,
    gt_disp_right: &DisparityMap,
    mask_left: &ConfidenceMask,
    mask_right: &ConfidenceMask,
) -> Result<f64> {
    let (h, w) = (styl_left.height(), styl_left.width());
    check_same(
        (h, w),
        &[
            (styl_right.height(), styl_right.width()),
            (gt_disp_left.height(), gt_disp_left.width()),
            (gt_disp_right.height(), gt_disp_right.width()),
            (mask_left.height(), mask_left.width()),
            (mask_right.height(), mask_right.width()),
        ],
        "image view loss",
    )?;
    let mut g = Graph::<f64>::new();
    let l = f64_node(&mut g, styl_left.data(), &[1, 3, h, w]);
    let r = f64_node(&mut g, styl_right.data(), &[1, 3, h, w]);
    let t = [targets(gt_disp_left, mask_left), targets(gt_disp_right, mask_right)];
    let out = view_loss_node(&mut g, [l, r], &t)?;
    Ok(g.value(out).data()[0])
}

/// Feature-level view loss; disparities and masks must already be at the
/// feature resolution (see [`scale_disparity`] and [`resize_mask_nearest`]).
pub fn feature_view_loss(
    feat_left: &FeatureMap,
    feat_right: &FeatureMap,
    disp_left: &DisparityMap,
    disp_right: &DisparityMap,
    mask_left: &ConfidenceMask,
    mask_right: &ConfidenceMask,
) -> Result<f64> {
    let (c, h, w) = (feat_left.channels(), feat_left.height(), feat_left.width());
    if feat_right.channels() != c {
        return Err(Error::Argument("feature view loss: channel counts differ".into()));
    }
    check_same(
        (h, w),
        &[
            (feat_right.height(), feat_right.width()),
            (disp_left.height(), disp_left.width()),
            (disp_right.height(), disp_right.width()),
            (mask_left.height(), mask_left.width()),
            (mask_right.height(), mask_right.width()),
        ],
        "feature view loss",
    )?;
    let mut g = Graph::<f64>::new();
    let l = f64_node(&mut g, feat_left.data(), &[1, c, h, w]);
    let r = f64_node(&mut g, feat_right.data(), &[1, c, h, w]);
    let t = [targets(disp_left, mask_left), targets(disp_right, mask_right)];
    let out = view_loss_node(&mut g, [l, r], &t)?;
    Ok(g.value(out).data()[0])
}

/// Style Gram matrices of one style image, computed once per training run.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleTarget<T = f32> {
    pub layers: Vec<String>,
    pub grams: Vec<Tensor<T>>,
}

impl<T: Real> StyleTarget<T> {
    pub fn new(vgg: &Vgg16<T>, style: &Tensor<T>, layers: &[String]) -> Result<Self> {
        let refs: Vec<&str> = layers.iter().map(String::as_str).collect();
        let feats = vgg.feature_tensors(style, &refs)?;
        let grams = layers.iter().map(|l| gram(&feats[l])).collect();
        Ok(StyleTarget { layers: layers.to_vec(), grams })
    }
}

/// Content loss between two images with the given extractor.
pub fn content_loss(vgg: &Vgg16<f32>, x: &Image, x_hat: &Image, layers: &[&str]) -> Result<f64> {
    if (x.height(), x.width()) != (x_hat.height(), x_hat.width()) {
        return Err(Error::Argument("content loss: image sizes differ".into()));
    }
    let target: Vec<Tensor<f32>> = {
        let f = vgg.feature_tensors(&x.to_tensor(), layers)?;
        layers.iter().map(|l| f[*l].clone()).collect()
    };
    let mut g = Graph::new();
    let xi = g.constant(x_hat.to_tensor());
    let f = vgg.features_node(&mut g, xi, layers)?;
    let hats: Vec<NodeId> = layers.iter().map(|l| f[*l]).collect();
    let out = content_loss_node(&mut g, &target, &hats)?;
    Ok(g.value(out).data()[0] as f64)
}

/// Style loss of `x_hat` against the style image `s`.
pub fn style_loss(vgg: &Vgg16<f32>, s: &Image, x_hat: &Image, layers: &[&str]) -> Result<f64> {
    let owned: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
    let target = StyleTarget::new(vgg, &s.to_tensor(), &owned)?;
    style_loss_cached(vgg, &target, x_hat)
}

pub fn style_loss_cached(vgg: &Vgg16<f32>, target: &StyleTarget<f32>, x_hat: &Image) -> Result<f64> {
    let refs: Vec<&str> = target.layers.iter().map(String::as_str).collect();
    let mut g = Graph::new();
    let xi = g.constant(x_hat.to_tensor());
    let f = vgg.features_node(&mut g, xi, &refs)?;
    let hats: Vec<NodeId> = refs.iter().map(|l| f[*l]).collect();
    let out = style_loss_node(&mut g, &target.grams, &hats)?;
    Ok(g.value(out).data()[0] as f64)
}

/// Which view-loss levels enter the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewLossLevels {
    None,
    Image,
    ImageAndFeature,
}

/// Weights and layer selection of the full objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub perceptual: PerceptualConfig,
    pub lambda: f64,
    pub view_levels: ViewLossLevels,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { perceptual: PerceptualConfig::default(), lambda: 100.0, view_levels: ViewLossLevels::ImageAndFeature }
    }
}

/// Per-term breakdown. `content` and `style` are summed over both views;
/// disabled view terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub content: f64,
    pub style: f64,
    pub view_img: f64,
    pub view_feat: f64,
    pub total: f64,
}

impl LossReport {
    pub fn recombine(&self, alpha: f64, beta: f64, lambda: f64) -> f64 {
        alpha * self.content + beta * self.style + lambda * (self.view_img + self.view_feat)
    }

    pub fn all_finite(&self) -> bool {
        [self.content, self.style, self.view_img, self.view_feat, self.total].iter().all(|v| v.is_finite())
    }
}

/// Graph nodes of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub content: NodeId,
    pub style: NodeId,
    pub view_img: NodeId,
    pub view_feat: NodeId,
    pub total: NodeId,
}

impl LossNodes {
    pub fn report<T: Real>(&self, g: &Graph<T>) -> LossReport {
        let v = |id: NodeId| g.value(id).data()[0].as_f64();
        LossReport {
            content: v(self.content),
            style: v(self.style),
            view_img: v(self.view_img),
            view_feat: v(self.view_feat),
            total: v(self.total),
        }
    }
}

/// Builds the total objective for a stylized pair.
///
/// `images` and `taps` are `[left, right]` nodes; `content_targets[v]` holds
/// the content-layer activations of the input image of view `v`.
pub fn total_loss_node<T: Real>(
    g: &mut Graph<T>,
    vgg: &Vgg16<T>,
    config: &LossConfig,
    images: [NodeId; 2],
    taps: [NodeId; 2],
    content_targets: &[Vec<Tensor<T>>; 2],
    style: &StyleTarget<T>,
    geometry: &ViewGeometry<T>,
) -> Result<LossNodes> {
    let p = &config.perceptual;
    let layers = p.all_layers();
    let mut content_terms = Vec::with_capacity(2);
    let mut style_terms = Vec::with_capacity(2);
    for (v, &img) in images.iter().enumerate() {
        let feats = vgg.features_node(g, img, &layers)?;
        let c: Vec<NodeId> = p.content_layers.iter().map(|l| feats[l]).collect();
        let s: Vec<NodeId> = p.style_layers.iter().map(|l| feats[l]).collect();
        content_terms.push(content_loss_node(g, &content_targets[v], &c)?);
        style_terms.push(style_loss_node(g, &style.grams, &s)?);
    }
    let content = add_all(g, &content_terms);
    let style_n = add_all(g, &style_terms);
    let zero = g.constant(Tensor::scalar(T::zero()));
    let view_img = match config.view_levels {
        ViewLossLevels::None => zero,
        _ => view_loss_node(g, images, &geometry.image)?,
    };
    let view_feat = match config.view_levels {
        ViewLossLevels::ImageAndFeature => view_loss_node(g, taps, &geometry.feature)?,
        _ => zero,
    };
    let a = g.tape.scale(content, T::lit(p.alpha));
    let b = g.tape.scale(style_n, T::lit(p.beta));
    let views = g.tape.add(view_img, view_feat);
    let v = g.tape.scale(views, T::lit(config.lambda));
    let total = add_all(g, &[a, b, v]);
    Ok(LossNodes { content, style: style_n, view_img, view_feat, total })
}

/// Eval-mode objective for an already stylized pair.
pub fn total_loss(
    vgg: &Vgg16<f32>,
    sample: &StereoSample,
    result: &crate::stylizer::StylizeResult,
    style: &StyleTarget<f32>,
    config: &LossConfig,
) -> Result<LossReport> {
    let inputs = [&sample.left, &sample.right];
    let refs: Vec<&str> = config.perceptual.content_layers.iter().map(String::as_str).collect();
    let mut content_targets: [Vec<Tensor<f32>>; 2] = [Vec::new(), Vec::new()];
    for (v, x) in inputs.iter().enumerate() {
        let f = vgg.feature_tensors(&x.to_tensor(), &refs)?;
        content_targets[v] = refs.iter().map(|l| f[*l].clone()).collect();
    }
    let fk = &result.feat_k_left;
    let geometry = ViewGeometry::from_sample(sample, fk.height(), fk.width())?;
    let mut g = Graph::new();
    let images = [g.constant(result.styl_left.to_tensor()), g.constant(result.styl_right.to_tensor())];
    let taps = [g.constant(result.feat_k_left.to_tensor()), g.constant(result.feat_k_right.to_tensor())];
    let nodes = total_loss_node(&mut g, vgg, config, images, taps, &content_targets, style, &geometry)?;
    Ok(nodes.report(&g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu3_3_shape() {
        let vgg = Vgg16::<f32>::default();
        let img = Image::filled(64, 64, 0.4).unwrap();
        let f = vgg.extract_features(&img, &["relu3_3"]).unwrap();
        let m = &f["relu3_3"];
        assert_eq!((m.channels(), m.height(), m.width()), (256, 16, 16));
        assert!(vgg.extract_features(&img, &["relu9_9"]).is_err());
    }

    #[test]
    fn constant_gram() {
        let t = Tensor::<f64>::full(&[1, 3, 4, 5], 2.0);
        assert!(gram(&t).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn losses_vanish_at_identity() {
        let vgg = Vgg16::<f32>::random(3);
        let s = crate::stereo_data::generate_toy_sample(1, 32, 32, 4.0).unwrap();
        assert_eq!(content_loss(&vgg, &s.left, &s.left, &["relu2_2"]).unwrap(), 0.0);
        assert_eq!(style_loss(&vgg, &s.left, &s.left, &["relu1_2", "relu2_2"]).unwrap(), 0.0);
    }
}
