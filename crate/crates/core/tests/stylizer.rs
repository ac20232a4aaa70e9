use stereo_style::losses::{total_loss_node, LossConfig, StyleTarget, ViewGeometry, Vgg16};
use stereo_style::nn::Graph;
use stereo_style::stereo_data::{generate_toy_sample, Image};
use stereo_style::stylizer::{
    forward_pair, shape_trace, stylize_pair, Aggregation, Mode, StylizerWeights, DEFAULT_TAP_LAYER,
};
use stereo_style::tensor::Tensor;

/// `(layer, channels, spatial divisor)` for one path, following the model
/// configuration table. A divisor of 4 means `H/4 x W/4`.
fn expected_path(agg: Aggregation) -> Vec<(String, usize, usize)> {
    let mut rows = Vec::new();
    let mut push = |name: &str, c: usize, d: usize| rows.push((name.to_string(), c, d));
    push("encoder.0", 16, 1);
    push("encoder.1", 32, 2);
    push("encoder.2", 48, 4);
    if agg == Aggregation::WarpGateConcat {
        for (i, c) in [6, 12, 6, 3, 1].into_iter().enumerate() {
            push(&format!("gate.{i}"), c, 4);
        }
    }
    let c0 = if agg == Aggregation::SingleImage { 48 } else { 96 };
    push("aggregate", c0, 4);
    push("decoder.0", 96, 4);
    push("decoder.1", 48, 4);
    for i in 2..7 {
        push(&format!("decoder.{i}"), 48, 4);
    }
    push("decoder.7", 32, 2);
    push("decoder.8", 16, 1);
    push("decoder.9", 3, 1);
    rows
}

fn expected_disparity() -> Vec<(String, usize, usize)> {
    let mut rows = vec![("disparity.0".to_string(), 32, 1), ("disparity.1".into(), 64, 2), ("disparity.2".into(), 48, 4)];
    for i in 3..8 {
        rows.push((format!("disparity.{i}"), 48, 4));
    }
    rows.extend([("disparity.8".into(), 24, 2), ("disparity.9".into(), 8, 1), ("disparity.10".into(), 3, 1), ("disparity.11".into(), 1, 1)]);
    rows
}

fn check_trace(agg: Aggregation, h: usize, w: usize) {
    let weights = StylizerWeights::<f32>::init(agg, 0);
    let trace = shape_trace(&weights, h, w).unwrap();
    let mut expected = Vec::new();
    let path = expected_path(agg);
    // Both encoders run first, then the disparity network once per view,
    // then aggregation and decoding per path.
    expected.extend(path[..3].iter().cloned());
    expected.extend(path[..3].iter().cloned());
    if agg.uses_disparity() {
        expected.extend(expected_disparity());
        expected.extend(expected_disparity());
    }
    expected.extend(path[3..].iter().cloned());
    expected.extend(path[3..].iter().cloned());
    let got: Vec<(String, usize, usize, usize)> =
        trace.iter().map(|t| (t.layer.clone(), t.shape[1], t.shape[2], t.shape[3])).collect();
    assert_eq!(got.len(), expected.len(), "{agg}: {got:?}");
    for ((name, c, d), (gname, gc, gh, gw)) in expected.iter().zip(&got) {
        assert_eq!((name, *c, h / d, w / d), (gname, *gc, *gh, *gw), "{agg} at {h}x{w}");
    }
}

#[cfg_attr(not(acceptance_harness), test)]
fn shape_trace_matches_model_table_at_64() {
    for agg in [Aggregation::SingleImage, Aggregation::Concat, Aggregation::WarpGateConcat] {
        check_trace(agg, 64, 64);
    }
}

#[cfg_attr(not(acceptance_harness), test)]
fn shape_trace_matches_model_table_at_960x540() {
    check_trace(Aggregation::WarpGateConcat, 540, 960);
}

#[cfg_attr(not(acceptance_harness), test)]
fn tap_layer_is_48_channels_at_quarter_resolution() {
    let weights = StylizerWeights::<f32>::init(Aggregation::WarpGateConcat, 1);
    let s = generate_toy_sample(3, 32, 48, 3.5).unwrap();
    let out = stylize_pair(&weights, &s.left, &s.right).unwrap();
    assert_eq!(DEFAULT_TAP_LAYER, 7);
    for f in [&out.feat_k_left, &out.feat_k_right] {
        assert_eq!((f.channels(), f.height(), f.width()), (48, 8, 12));
    }
    assert_eq!((out.styl_left.height(), out.styl_left.width()), (32, 48));
    assert!(out.styl_left.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[cfg_attr(not(acceptance_harness), test)]
fn eval_is_deterministic_and_swap_symmetric() {
    for agg in [Aggregation::SingleImage, Aggregation::Concat, Aggregation::WarpGateConcat] {
        let weights = StylizerWeights::<f32>::init(agg, 2);
        let s = generate_toy_sample(5, 32, 32, 3.5).unwrap();
        let a = stylize_pair(&weights, &s.left, &s.right).unwrap();
        let b = stylize_pair(&weights, &s.left, &s.right).unwrap();
        assert_eq!(a, b);
        let swapped = stylize_pair(&weights, &s.right, &s.left).unwrap();
        assert_eq!(swapped.styl_left, a.styl_right, "{agg}");
        assert_eq!(swapped.styl_right, a.styl_left, "{agg}");
        if let (Some(g), Some(gs)) = (&a.gate_left, &swapped.gate_right) {
            assert_eq!(g, gs);
        }
    }
}

#[cfg_attr(not(acceptance_harness), test)]
fn odd_sizes_are_rejected() {
    let weights = StylizerWeights::<f32>::init(Aggregation::Concat, 0);
    let img = Image::filled(30, 32, 0.5).unwrap();
    assert!(stylize_pair(&weights, &img, &img).is_err());
}

#[cfg_attr(not(acceptance_harness), test)]
fn gradients_reach_trainable_groups_only() {
    let vgg = Vgg16::<f32>::random(4);
    let s = generate_toy_sample(8, 32, 32, 3.5).unwrap();
    let style = StyleTarget::new(&vgg, &Image::filled(32, 32, 0.3).unwrap().to_tensor(), &LossConfig::default().perceptual.style_layers).unwrap();
    for (mode, disparity_grads) in [(Mode::TRAIN_FROZEN_DISPARITY, false), (Mode::TRAIN_ALL, true)] {
        let weights = StylizerWeights::<f32>::init(Aggregation::WarpGateConcat, 6);
        let mut g = Graph::new();
        let l = g.constant(s.left.to_tensor());
        let r = g.constant(s.right.to_tensor());
        let [pl, pr] = forward_pair(&mut g, &weights, l, r, None, DEFAULT_TAP_LAYER, mode).unwrap();
        let cfg = LossConfig::default();
        let refs: Vec<&str> = cfg.perceptual.content_layers.iter().map(String::as_str).collect();
        let ct = |img: &Image| -> Vec<Tensor<f32>> {
            let f = vgg.feature_tensors(&img.to_tensor(), &refs).unwrap();
            refs.iter().map(|k| f[*k].clone()).collect()
        };
        let targets = [ct(&s.left), ct(&s.right)];
        let geo = ViewGeometry::from_sample(&s, 8, 8).unwrap();
        let nodes =
            total_loss_node(&mut g, &vgg, &cfg, [pl.image, pr.image], [pl.tap, pr.tap], &targets, &style, &geo).unwrap();
        let grads = g.param_grads(&g.tape.backward(nodes.total));
        for group in ["encoder.", "gate.", "decoder."] {
            let norm: f64 = grads.iter().filter(|(k, _)| k.starts_with(group)).map(|(_, t)| t.sum_sq() as f64).sum();
            assert!(norm > 0.0, "{group} receives no gradient");
        }
        let disp: f64 = grads.iter().filter(|(k, _)| k.starts_with("disparity.")).map(|(_, t)| t.sum_sq() as f64).sum();
        let has_disp = grads.keys().any(|k| k.starts_with("disparity."));
        assert_eq!(has_disp, disparity_grads);
        assert_eq!(disp > 0.0, disparity_grads);
        // Running statistics move only for trainable scopes.
        let updated_disp = g.bn_updates().iter().any(|u| u.prefix.starts_with("disparity."));
        assert_eq!(updated_disp, disparity_grads);
    }
}

/// Every check in this file, for the acceptance harness.
#[allow(dead_code)]
pub const CHECKS: &[(&str, fn())] = &[
    ("shape_trace_matches_model_table_at_64", shape_trace_matches_model_table_at_64),
    ("shape_trace_matches_model_table_at_960x540", shape_trace_matches_model_table_at_960x540),
    ("tap_layer_is_48_channels_at_quarter_resolution", tap_layer_is_48_channels_at_quarter_resolution),
    ("eval_is_deterministic_and_swap_symmetric", eval_is_deterministic_and_swap_symmetric),
    ("odd_sizes_are_rejected", odd_sizes_are_rejected),
    ("gradients_reach_trainable_groups_only", gradients_reach_trainable_groups_only),
];
