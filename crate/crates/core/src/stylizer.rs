//! Dual-path stylizing network: shared encoder, feature aggregation block
//! (disparity sub-network, gate sub-network, gated refinement, concatenation)
//! and shared decoder.
//!
//! The disparity sub-network predicts a signed horizontal offset `o` per
//! target pixel; the other view's features are sampled at `x - o`. For the
//! left view `o = d_L`, for the right view `o = -d_R`. Using the raw output as
//! the offset in both paths keeps the network exactly swap-symmetric.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::NodeId;
use crate::error::{Error, Result};
use crate::geometry::{FeatureMap, GateMap};
use crate::nn::{activate, batch_norm, glorot_uniform, init_batch_norm, Activation, Graph, ParamKind, ParamStore, Scope, TraceEntry};
use crate::stereo_data::{DisparityMap, Image, View};
use crate::tensor::{Real, Tensor};

/// Channels of the encoder output.
pub const FEATURE_CHANNELS: usize = 48;
/// Encoder/decoder resolution ratio.
pub const FEATURE_STRIDE: usize = 4;
/// Default decoder tap for the feature-level view loss (1-based).
pub const DEFAULT_TAP_LAYER: usize = 7;

pub const ENCODER: &str = "encoder";
pub const DECODER: &str = "decoder";
pub const GATE: &str = "gate";
pub const DISPARITY: &str = "disparity";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    Residual,
    Deconv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    Batch,
    None,
}

/// Rational stride; `1/2` denotes 2x upsampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stride {
    pub num: usize,
    pub den: usize,
}

impl Stride {
    pub const ONE: Stride = Stride { num: 1, den: 1 };
    pub const TWO: Stride = Stride { num: 2, den: 1 };
    pub const HALF: Stride = Stride { num: 1, den: 2 };

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: Stride,
    pub c_in: usize,
    pub c_out: usize,
    pub activation: Activation,
    pub normalization: Normalization,
}

impl LayerSpec {
    const fn conv(kernel: usize, stride: Stride, c_in: usize, c_out: usize, activation: Activation) -> Self {
        LayerSpec { kind: LayerKind::Conv, kernel, stride, c_in, c_out, activation, normalization: Normalization::Batch }
    }

    const fn res(c: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Residual,
            kernel: 3,
            stride: Stride::ONE,
            c_in: c,
            c_out: c,
            activation: Activation::Relu,
            normalization: Normalization::Batch,
        }
    }

    const fn deconv(c_in: usize, c_out: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Deconv,
            kernel: 3,
            stride: Stride::HALF,
            c_in,
            c_out,
            activation: Activation::Relu,
            normalization: Normalization::Batch,
        }
    }
}

/// How each path combines its own features with the other view's.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Aggregation {
    /// No aggregation; the decoder sees the 48 encoder channels only.
    SingleImage,
    /// Concatenate the unaligned other-view features.
    Concat,
    /// Warp, gate and concatenate.
    WarpGateConcat,
}

impl Aggregation {
    pub fn decoder_input_channels(self) -> usize {
        match self {
            Aggregation::SingleImage => FEATURE_CHANNELS,
            _ => 2 * FEATURE_CHANNELS,
        }
    }

    pub fn uses_disparity(self) -> bool {
        self == Aggregation::WarpGateConcat
    }

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::SingleImage => "SingleImage",
            Aggregation::Concat => "CON",
            Aggregation::WarpGateConcat => "W-G-CON",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SingleImage" => Ok(Aggregation::SingleImage),
            "CON" => Ok(Aggregation::Concat),
            "W-G-CON" => Ok(Aggregation::WarpGateConcat),
            other => Err(Error::Argument(format!("unknown aggregation `{other}`"))),
        }
    }
}

pub fn encoder_layers() -> Vec<LayerSpec> {
    use Activation::Relu;
    vec![
        LayerSpec::conv(3, Stride::ONE, 3, 16, Relu),
        LayerSpec::conv(3, Stride::TWO, 16, 32, Relu),
        LayerSpec::conv(3, Stride::TWO, 32, 48, Relu),
    ]
}

/// Ten layers; the first accepts 96 channels, or 48 for the single-image
/// network, and widens to 96 either way.
pub fn decoder_layers(aggregation: Aggregation) -> Vec<LayerSpec> {
    use Activation::{Relu, Tanh};
    let c0 = aggregation.decoder_input_channels();
    let mut layers = vec![LayerSpec::conv(3, Stride::ONE, c0, 96, Relu), LayerSpec::conv(3, Stride::ONE, 96, 48, Relu)];
    layers.extend((0..5).map(|_| LayerSpec::res(48)));
    layers.push(LayerSpec::deconv(48, 32));
    layers.push(LayerSpec::deconv(32, 16));
    layers.push(LayerSpec::conv(3, Stride::ONE, 16, 3, Tanh));
    layers
}

/// The 8 -> 3 layer has a bias and no normalization; the final 3 -> 1 layer
/// is linear with a bias.
pub fn disparity_layers() -> Vec<LayerSpec> {
    use Activation::Relu;
    let mut layers = vec![
        LayerSpec::conv(3, Stride::ONE, 6, 32, Relu),
        LayerSpec::conv(3, Stride::TWO, 32, 64, Relu),
        LayerSpec::conv(3, Stride::TWO, 64, 48, Relu),
    ];
    layers.extend((0..5).map(|_| LayerSpec::res(48)));
    layers.push(LayerSpec::deconv(48, 24));
    layers.push(LayerSpec::deconv(24, 8));
    layers.push(LayerSpec { normalization: Normalization::None, ..LayerSpec::conv(3, Stride::ONE, 8, 3, Relu) });
    layers.push(LayerSpec {
        normalization: Normalization::None,
        ..LayerSpec::conv(3, Stride::ONE, 3, 1, Activation::None)
    });
    layers
}

pub fn gate_layers() -> Vec<LayerSpec> {
    use Activation::{Relu, Tanh};
    vec![
        LayerSpec::conv(3, Stride::ONE, 3, 6, Relu),
        LayerSpec::conv(1, Stride::ONE, 6, 12, Relu),
        LayerSpec::conv(1, Stride::ONE, 12, 6, Relu),
        LayerSpec::conv(1, Stride::ONE, 6, 3, Relu),
        LayerSpec::conv(1, Stride::ONE, 3, 1, Tanh),
    ]
}

fn init_conv_like<T: Real>(store: &mut ParamStore<T>, prefix: &str, spec: &LayerSpec, transposed: bool, rng: &mut ChaCha8Rng) {
    let k = spec.kernel;
    let shape = if transposed { [spec.c_in, spec.c_out, k, k] } else { [spec.c_out, spec.c_in, k, k] };
    let w = glorot_uniform(&shape, spec.c_in * k * k, spec.c_out * k * k, rng);
    store.insert(format!("{prefix}.weight"), w, ParamKind::Weight);
    match spec.normalization {
        Normalization::Batch => init_batch_norm(store, &format!("{prefix}.bn"), spec.c_out),
        Normalization::None => store.insert(format!("{prefix}.bias"), Tensor::zeros(&[spec.c_out]), ParamKind::Weight),
    }
}

fn init_layer<T: Real>(store: &mut ParamStore<T>, prefix: &str, spec: &LayerSpec, rng: &mut ChaCha8Rng) {
    match spec.kind {
        LayerKind::Conv => init_conv_like(store, prefix, spec, false, rng),
        LayerKind::Deconv => init_conv_like(store, prefix, spec, true, rng),
        LayerKind::Residual => {
            let inner = LayerSpec { kind: LayerKind::Conv, ..*spec };
            init_conv_like(store, &format!("{prefix}.conv1"), &inner, false, rng);
            init_conv_like(store, &format!("{prefix}.conv2"), &inner, false, rng);
            // residual branches start switched off
            store.insert(format!("{prefix}.conv2.bn.gamma"), Tensor::zeros(&[spec.c_out]), ParamKind::Weight);
        }
    }
}

fn init_group<T: Real>(store: &mut ParamStore<T>, group: &str, layers: &[LayerSpec], rng: &mut ChaCha8Rng) {
    for (i, spec) in layers.iter().enumerate() {
        init_layer(store, &format!("{group}.{i}"), spec, rng);
    }
}

/// Disparity weights; the output layer starts at zero, predicting no offset.
fn init_disparity_group<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    let layers = disparity_layers();
    init_group(store, DISPARITY, &layers, rng);
    let last = layers.len() - 1;
    store.insert(format!("{DISPARITY}.{last}.weight"), Tensor::zeros(&[1, 3, 3, 3]), ParamKind::Weight);
}

/// Convolution (+ normalization) without activation, padding per layer type:
/// reflection for stride-1 3x3, zero padding for strided layers.
fn conv_norm<T: Real>(g: &mut Graph<T>, scope: &Scope<'_, T>, spec: &LayerSpec, x: NodeId) -> Result<NodeId> {
    let w = scope.param(g, "weight")?;
    let bias = match spec.normalization {
        Normalization::None => Some(scope.param(g, "bias")?),
        Normalization::Batch => None,
    };
    let y = match (spec.kind, spec.stride) {
        (LayerKind::Deconv, _) => g.tape.conv_transpose2d(x, w, bias, 2, 1, 1),
        (_, s) if s == Stride::ONE => {
            let pad = spec.kernel / 2;
            let input = if pad > 0 { g.tape.reflect_pad(x, pad) } else { x };
            g.tape.conv2d(input, w, bias, 1, 0)
        }
        (_, s) => g.tape.conv2d(x, w, bias, s.num, spec.kernel / 2),
    };
    match spec.normalization {
        Normalization::Batch => batch_norm(g, &scope.sub("bn"), y),
        Normalization::None => Ok(y),
    }
}

fn apply_layer<T: Real>(g: &mut Graph<T>, scope: &Scope<'_, T>, spec: &LayerSpec, x: NodeId) -> Result<NodeId> {
    let c = g.value(x).dims4().1;
    if c != spec.c_in {
        return Err(Error::Argument(format!("{}: expected {} input channels, got {c}", scope.prefix, spec.c_in)));
    }
    let out = match spec.kind {
        LayerKind::Residual => {
            let inner = LayerSpec { kind: LayerKind::Conv, ..*spec };
            let h = conv_norm(g, &scope.sub("conv1"), &inner, x)?;
            let h = g.tape.relu(h);
            let h = conv_norm(g, &scope.sub("conv2"), &inner, h)?;
            g.tape.add(x, h)
        }
        _ => {
            let y = conv_norm(g, scope, spec, x)?;
            activate(g, y, spec.activation)
        }
    };
    g.record(&scope.prefix, out);
    Ok(out)
}

/// Runs `layers` in sequence, returning every layer output.
fn apply_group<T: Real>(g: &mut Graph<T>, scope: &Scope<'_, T>, layers: &[LayerSpec], x: NodeId) -> Result<Vec<NodeId>> {
    let mut outs = Vec::with_capacity(layers.len());
    let mut h = x;
    for (i, spec) in layers.iter().enumerate() {
        h = apply_layer(g, &scope.sub(&i.to_string()), spec, h)?;
        outs.push(h);
    }
    Ok(outs)
}

/// Network parameters for one aggregation variant.
#[derive(Clone, Debug)]
pub struct StylizerWeights<T = f32> {
    pub aggregation: Aggregation,
    pub params: ParamStore<T>,
}

impl<T: Real> PartialEq for StylizerWeights<T> {
    fn eq(&self, other: &Self) -> bool {
        self.aggregation == other.aggregation && self.params == other.params
    }
}

impl<T: Real> StylizerWeights<T> {
    /// Glorot-uniform convolutions, unit/zero normalization parameters.
    /// Gate and disparity parameters exist only for the warp-gate variant.
    pub fn init(aggregation: Aggregation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_group(&mut params, ENCODER, &encoder_layers(), &mut rng);
        init_group(&mut params, DECODER, &decoder_layers(aggregation), &mut rng);
        if aggregation.uses_disparity() {
            init_group(&mut params, GATE, &gate_layers(), &mut rng);
            init_disparity_group(&mut params, &mut rng);
        }
        StylizerWeights { aggregation, params }
    }

    /// Standalone disparity sub-network parameters.
    pub fn init_disparity(seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_disparity_group(&mut params, &mut rng);
        params
    }

    pub fn group(&self, prefix: &str) -> ParamStore<T> {
        self.params.subset(&format!("{prefix}."))
    }

    pub fn cast<U: Real>(&self) -> StylizerWeights<U> {
        StylizerWeights { aggregation: self.aggregation, params: self.params.cast() }
    }
}

/// Gradient settings for one forward pass. Normalization layers always use
/// per-sample statistics, at training and inference alike.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Encoder, gate and decoder receive gradients and update running statistics.
    pub train: bool,
    /// The disparity sub-network receives gradients and updates running statistics.
    pub train_disparity: bool,
}

impl Mode {
    pub const EVAL: Mode = Mode { train: false, train_disparity: false };
    pub const TRAIN_FROZEN_DISPARITY: Mode = Mode { train: true, train_disparity: false };
    pub const TRAIN_ALL: Mode = Mode { train: true, train_disparity: true };
}

fn check_pair<T: Real>(g: &Graph<T>, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
    let (_, ca, ha, wa) = g.value(a).dims4();
    let (_, cb, hb, wb) = g.value(b).dims4();
    if (ca, ha, wa) != (cb, hb, wb) {
        return Err(Error::Argument(format!("view shapes differ: {ca}x{ha}x{wa} vs {cb}x{hb}x{wb}")));
    }
    if ha % FEATURE_STRIDE != 0 || wa % FEATURE_STRIDE != 0 {
        return Err(Error::Argument(format!("image size {ha}x{wa} must be divisible by {FEATURE_STRIDE}")));
    }
    Ok((ha, wa))
}

pub fn encode_node<T: Real>(g: &mut Graph<T>, weights: &StylizerWeights<T>, x: NodeId, train: bool) -> Result<NodeId> {
    let (_, _, h, w) = g.value(x).dims4();
    if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
        return Err(Error::Argument(format!("image size {h}x{w} must be divisible by {FEATURE_STRIDE}")));
    }
    let scope = Scope::new(&weights.params, ENCODER, true, train);
    Ok(*apply_group(g, &scope, &encoder_layers(), x)?.last().expect("encoder layers"))
}

/// Signed offset `[1,1,H,W]` for the view whose image is `target`; the
/// network input is the channel concatenation `(other, target)`.
pub fn disparity_node<T: Real>(g: &mut Graph<T>, params: &ParamStore<T>, target: NodeId, other: NodeId, train: bool) -> Result<NodeId> {
    check_pair(g, target, other)?;
    let input = g.tape.concat_channels(&[other, target]);
    let scope = Scope::new(params, DISPARITY, true, train);
    Ok(*apply_group(g, &scope, &disparity_layers(), input)?.last().expect("disparity layers"))
}

/// Gate in `[0, 1]`: `clamp(tanh(.), 0, 1)` of the gate sub-network output.
pub fn gate_node<T: Real>(g: &mut Graph<T>, weights: &StylizerWeights<T>, diff: NodeId, train: bool) -> Result<NodeId> {
    let c = g.value(diff).dims4().1;
    if c != 3 {
        return Err(Error::Argument(format!("gate expects 3 channels, got {c}")));
    }
    let scope = Scope::new(&weights.params, GATE, true, train);
    let t = *apply_group(g, &scope, &gate_layers(), diff)?.last().expect("gate layers");
    Ok(g.tape.clamp(t, T::zero(), T::one()))
}

/// Output of [`aggregate_node`].
pub struct AggregateNodes {
    pub features: NodeId,
    pub gate: Option<NodeId>,
}

/// Feature aggregation for one path. `offset_self` is the full-resolution
/// signed offset of this view (required by the warp-gate variant).
#[allow(clippy::too_many_arguments)]
pub fn aggregate_node<T: Real>(
    g: &mut Graph<T>,
    weights: &StylizerWeights<T>,
    f_self: NodeId,
    f_other: NodeId,
    x_self: NodeId,
    x_other: NodeId,
    offset_self: Option<NodeId>,
    train: bool,
) -> Result<AggregateNodes> {
    if g.value(f_self).shape() != g.value(f_other).shape() {
        return Err(Error::Argument("aggregate: feature shapes differ".into()));
    }
    match weights.aggregation {
        Aggregation::SingleImage => Ok(AggregateNodes { features: f_self, gate: None }),
        Aggregation::Concat => Ok(AggregateNodes { features: g.tape.concat_channels(&[f_self, f_other]), gate: None }),
        Aggregation::WarpGateConcat => {
            let offset = offset_self.ok_or_else(|| Error::Argument("warp-gate aggregation needs an offset".into()))?;
            let (_, _, fh, fw) = g.value(f_self).dims4();
            let (_, _, h, w) = g.value(x_self).dims4();
            if g.value(offset).shape() != [1, 1, h, w] || (fh * FEATURE_STRIDE, fw * FEATURE_STRIDE) != (h, w) {
                return Err(Error::Argument("aggregate: inconsistent image, feature or offset shapes".into()));
            }
            let small = g.tape.resize_bilinear(offset, fh, fw);
            let small = g.tape.scale(small, T::lit(fw as f64 / w as f64));
            let warped = g.tape.warp(f_other, small);
            let rs = g.tape.resize_bilinear(x_self, fh, fw);
            let ro = g.tape.resize_bilinear(x_other, fh, fw);
            let ro = g.tape.warp(ro, small);
            let d = g.tape.sub(rs, ro);
            let d = g.tape.abs(d);
            let gate = gate_node(g, weights, d, train)?;
            let refined = refine(g, warped, f_self, gate);
            Ok(AggregateNodes { features: g.tape.concat_channels(&[f_self, refined]), gate: Some(gate) })
        }
    }
}

/// `warped * G + f_self * (1 - G)`, broadcasting the gate over channels.
pub fn refine<T: Real>(g: &mut Graph<T>, warped: NodeId, f_self: NodeId, gate: NodeId) -> NodeId {
    let inv = g.tape.affine(gate, -T::one(), T::one());
    let a = g.tape.mul_bcast(warped, gate);
    let b = g.tape.mul_bcast(f_self, inv);
    g.tape.add(a, b)
}

/// Returns the image in `[0, 1]` and the output of decoder layer `tap` (1-based).
pub fn decode_node<T: Real>(
    g: &mut Graph<T>,
    weights: &StylizerWeights<T>,
    agg: NodeId,
    tap: usize,
    train: bool,
) -> Result<(NodeId, NodeId)> {
    let layers = decoder_layers(weights.aggregation);
    if tap == 0 || tap > layers.len() {
        return Err(Error::Argument(format!("tap layer {tap} outside 1..={}", layers.len())));
    }
    let scope = Scope::new(&weights.params, DECODER, true, train);
    let outs = apply_group(g, &scope, &layers, agg)?;
    let y = *outs.last().expect("decoder layers");
    let img = g.tape.affine(y, T::lit(0.5), T::lit(0.5));
    Ok((img, outs[tap - 1]))
}

/// Per-view nodes of a stereo forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PathNodes {
    pub image: NodeId,
    pub tap: NodeId,
    pub gate: Option<NodeId>,
    pub offset: Option<NodeId>,
}

/// Both paths of the network. `offsets` replaces the disparity sub-network
/// with precomputed signed offsets `(left, right)`.
pub fn forward_pair<T: Real>(
    g: &mut Graph<T>,
    weights: &StylizerWeights<T>,
    left: NodeId,
    right: NodeId,
    offsets: Option<(NodeId, NodeId)>,
    tap: usize,
    mode: Mode,
) -> Result<[PathNodes; 2]> {
    check_pair(g, left, right)?;
    let fl = encode_node(g, weights, left, mode.train)?;
    let fr = encode_node(g, weights, right, mode.train)?;
    let offsets = match (weights.aggregation.uses_disparity(), offsets) {
        (false, _) => None,
        (true, Some(o)) => Some(o),
        (true, None) => {
            let ol = disparity_node(g, &weights.params, left, right, mode.train_disparity)?;
            let or = disparity_node(g, &weights.params, right, left, mode.train_disparity)?;
            Some((ol, or))
        }
    };
    let mut paths = Vec::with_capacity(2);
    for (i, (f_self, f_other, x_self, x_other)) in [(fl, fr, left, right), (fr, fl, right, left)].into_iter().enumerate() {
        let offset = offsets.map(|(a, b)| if i == 0 { a } else { b });
        let agg = aggregate_node(g, weights, f_self, f_other, x_self, x_other, offset, mode.train)?;
        g.record("aggregate", agg.features);
        let (image, tap_node) = decode_node(g, weights, agg.features, tap, mode.train)?;
        paths.push(PathNodes { image, tap: tap_node, gate: agg.gate, offset });
    }
    Ok([paths[0], paths[1]])
}

/// Eval-mode stereo stylization output.
#[derive(Clone, Debug, PartialEq)]
pub struct StylizeResult {
    pub styl_left: Image,
    pub styl_right: Image,
    pub feat_k_left: FeatureMap,
    pub feat_k_right: FeatureMap,
    pub gate_left: Option<GateMap>,
    pub gate_right: Option<GateMap>,
    pub pred_disp_left: Option<DisparityMap>,
    pub pred_disp_right: Option<DisparityMap>,
}

fn feature(g: &Graph<f32>, id: NodeId) -> Result<FeatureMap> {
    FeatureMap::from_tensor(g.value(id))
}

fn gate_map(g: &Graph<f32>, id: NodeId) -> Result<GateMap> {
    let (_, _, h, w) = g.value(id).dims4();
    GateMap::new(h, w, g.value(id).data().to_vec())
}

fn offset_to_disparity(t: &Tensor<f32>, view: View) -> Result<DisparityMap> {
    let (_, _, h, w) = t.dims4();
    let s = view.offset_sign();
    DisparityMap::unchecked_sign(h, w, t.data().iter().map(|&v| s * v).collect(), view)
}

/// Stylizes a stereo pair in eval mode.
pub fn stylize_pair(weights: &StylizerWeights<f32>, left: &Image, right: &Image) -> Result<StylizeResult> {
    stylize_pair_with_tap(weights, left, right, DEFAULT_TAP_LAYER)
}

pub fn stylize_pair_with_tap(weights: &StylizerWeights<f32>, left: &Image, right: &Image, tap: usize) -> Result<StylizeResult> {
    let mut g = Graph::new();
    let l = g.constant(left.to_tensor());
    let r = g.constant(right.to_tensor());
    let [pl, pr] = forward_pair(&mut g, weights, l, r, None, tap, Mode::EVAL)?;
    let gates = match (pl.gate, pr.gate) {
        (Some(a), Some(b)) => (Some(gate_map(&g, a)?), Some(gate_map(&g, b)?)),
        _ => (None, None),
    };
    let disps = match (pl.offset, pr.offset) {
        (Some(a), Some(b)) => {
            (Some(offset_to_disparity(g.value(a), View::Left)?), Some(offset_to_disparity(g.value(b), View::Right)?))
        }
        _ => (None, None),
    };
    Ok(StylizeResult {
        styl_left: Image::from_tensor(g.value(pl.image))?,
        styl_right: Image::from_tensor(g.value(pr.image))?,
        feat_k_left: feature(&g, pl.tap)?,
        feat_k_right: feature(&g, pr.tap)?,
        gate_left: gates.0,
        gate_right: gates.1,
        pred_disp_left: disps.0,
        pred_disp_right: disps.1,
    })
}

pub fn encode(weights: &StylizerWeights<f32>, x: &Image) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let xi = g.constant(x.to_tensor());
    let f = encode_node(&mut g, weights, xi, false)?;
    feature(&g, f)
}

/// Disparity of `view` predicted from its own image `target` and the other view.
pub fn predict_disparity(params: &ParamStore<f32>, target: &Image, other: &Image, view: View) -> Result<DisparityMap> {
    let mut g = Graph::new();
    let t = g.constant(target.to_tensor());
    let o = g.constant(other.to_tensor());
    let out = disparity_node(&mut g, params, t, o, false)?;
    offset_to_disparity(g.value(out), view)
}

pub fn gate_forward(weights: &StylizerWeights<f32>, diff: &FeatureMap) -> Result<GateMap> {
    let mut g = Graph::new();
    let d = g.constant(diff.to_tensor());
    let out = gate_node(&mut g, weights, d, false)?;
    gate_map(&g, out)
}

/// Eval-mode aggregation for one path, using the predicted disparity of `x_self`'s view.
pub fn aggregate(
    weights: &StylizerWeights<f32>,
    f_self: &FeatureMap,
    f_other: &FeatureMap,
    x_self: &Image,
    x_other: &Image,
    pred_disp_self: &DisparityMap,
) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let fs = g.constant(f_self.to_tensor());
    let fo = g.constant(f_other.to_tensor());
    let xs = g.constant(x_self.to_tensor());
    let xo = g.constant(x_other.to_tensor());
    let off = g.constant(pred_disp_self.offset_tensor());
    let out = aggregate_node(&mut g, weights, fs, fo, xs, xo, Some(off), false)?;
    feature(&g, out.features)
}

pub fn decode(weights: &StylizerWeights<f32>, agg: &FeatureMap, tap: usize) -> Result<(Image, FeatureMap)> {
    let mut g = Graph::new();
    let a = g.constant(agg.to_tensor());
    let (img, t) = decode_node(&mut g, weights, a, tap, false)?;
    Ok((Image::from_tensor(g.value(img))?, feature(&g, t)?))
}

/// Layer-by-layer output shapes of one eval forward pass on an `h x w` pair.
pub fn shape_trace(weights: &StylizerWeights<f32>, h: usize, w: usize) -> Result<Vec<TraceEntry>> {
    let mut g = Graph::with_trace();
    let x = g.constant(Tensor::full(&[1, 3, h, w], 0.5));
    let y = g.constant(Tensor::full(&[1, 3, h, w], 0.25));
    forward_pair(&mut g, weights, x, y, None, DEFAULT_TAP_LAYER, Mode::EVAL)?;
    Ok(g.trace().expect("trace enabled").to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_tables_chain() {
        for agg in [Aggregation::SingleImage, Aggregation::Concat, Aggregation::WarpGateConcat] {
            let dec = decoder_layers(agg);
            assert_eq!(dec.len(), 10);
            assert_eq!(dec[0].c_in, agg.decoder_input_channels());
            for table in [encoder_layers(), dec, disparity_layers(), gate_layers()] {
                for pair in table.windows(2) {
                    assert_eq!(pair[0].c_out, pair[1].c_in);
                }
            }
        }
        assert_eq!(decoder_layers(Aggregation::WarpGateConcat)[6].kind, LayerKind::Residual);
    }

    #[test]
    fn param_groups_follow_variant() {
        let single = StylizerWeights::<f32>::init(Aggregation::SingleImage, 0);
        assert!(single.group(GATE).is_empty());
        assert_eq!(single.params.get("decoder.0.weight").unwrap().shape(), &[96, 48, 3, 3]);
        let full = StylizerWeights::<f32>::init(Aggregation::WarpGateConcat, 0);
        assert!(!full.group(GATE).is_empty());
        assert!(!full.group(DISPARITY).is_empty());
        assert_eq!(full.params.get("decoder.0.weight").unwrap().shape(), &[96, 96, 3, 3]);
    }

    #[test]
    fn encoder_shapes() {
        let w = StylizerWeights::<f32>::init(Aggregation::WarpGateConcat, 1);
        let img = Image::filled(96, 96, 0.3).unwrap();
        let f = encode(&w, &img).unwrap();
        assert_eq!((f.channels(), f.height(), f.width()), (48, 24, 24));
        assert!(encode(&w, &Image::filled(30, 32, 0.3).unwrap()).is_err());
    }
}
