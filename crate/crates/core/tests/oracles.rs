//! Library operators against independent nested-loop implementations (f64).

mod common;

use common::*;
use stereo_style::geometry::{view_inconsistency_map, warp_horizontal, FeatureMap};
use stereo_style::losses::{
    content_loss_node, gram, image_view_loss, masked_view_term, style_loss_node, view_loss_node, ViewTargets, Vgg16,
    VGG_CONVS,
};
use stereo_style::nn::Graph;
use stereo_style::stereo_data::{ConfidenceMask, DisparityMap, Image, View};
use stereo_style::stylizer::{aggregate_node, gate_node, refine, Aggregation, StylizerWeights};
use stereo_style::tensor::Tensor;

const TOL: f64 = 1e-6;
const TRIALS: u64 = 12;

/// Random `(c, h, w)` with `h, w <= 8` and `c <= 6`.
fn dims(seed: u64) -> (usize, usize, usize) {
    use rand::Rng;
    let mut r = rng(seed ^ 0xd1);
    (r.gen_range(1..=6), r.gen_range(1..=8), r.gen_range(2..=8))
}

#[cfg_attr(not(acceptance_harness), test)]
fn warp_matches_oracle() {
    for seed in 0..TRIALS {
        let (c, h, w) = dims(seed);
        let mut r = rng(seed);
        let src = random(&[1, c, h, w], &mut r, -1.0, 1.0);
        let off = random_offsets(h, w, &mut r, 3.5);
        let mut g = Graph::<f64>::new();
        let s = g.constant(src.clone());
        let o = g.constant(off.clone());
        let out = g.tape.warp(s, o);
        assert_close(g.value(out).data(), warp(&src, &off).data(), TOL, "warp");
    }
}

#[cfg_attr(not(acceptance_harness), test)]
fn public_warp_matches_oracle() {
    for seed in 0..TRIALS {
        let (c, h, w) = dims(seed);
        let mut r = rng(100 + seed);
        let src = random(&[1, c, h, w], &mut r, -1.0, 1.0).cast::<f32>().cast::<f64>();
        let disp = random(&[1, 1, h, w], &mut r, 0.0, 3.5).cast::<f32>();
        for view in [View::Left, View::Right] {
            let map = DisparityMap::new(h, w, disp.data().to_vec(), view).unwrap();
            let fm = FeatureMap::new(c, h, w, src.data().iter().map(|&v| v as f32).collect()).unwrap();
            let out = warp_horizontal(&fm, &map).unwrap();
            let sign = f64::from(view.offset_sign());
            let off = disp.cast::<f64>().map(|d| sign * d);
            let expect = warp(&src, &off);
            let got: Vec<f64> = out.warped.data().iter().map(|&v| v as f64).collect();
            // f32 arithmetic inside: compare at single-precision resolution.
            assert_close(&got, expect.data(), 1e-6 * 8.0, "warp_horizontal");
            assert_eq!(out.valid, warp_valid(&off));
        }
    }
}

#[cfg_attr(not(acceptance_harness), test)]
fn gram_matches_oracle() {
    for seed in 0..TRIALS {
        let (c, h, w) = dims(seed);
        let f = random(&[1, c, h, w], &mut rng(200 + seed), -2.0, 2.0);
        assert_close(gram(&f).data(), &common::gram(&f), TOL, "gram");
    }
}

#[cfg_attr(not(acceptance_harness), test)]
fn content_and_style_match_oracle() {
    for seed in 0..TRIALS {
        let mut r = rng(300 + seed);
        let layers: Vec<(usize, usize, usize)> = (0..3).map(|k| dims(seed * 3 + k)).collect();
        let a: Vec<Tensor<f64>> = layers.iter().map(|&(c, h, w)| random(&[1, c, h, w], &mut r, 0.0, 2.0)).collect();
        let b: Vec<Tensor<f64>> = layers.iter().map(|&(c, h, w)| random(&[1, c, h, w], &mut r, 0.0, 2.0)).collect();
        let mut g = Graph::<f64>::new();
        let hats: Vec<_> = b.iter().map(|t| g.constant(t.clone())).collect();
        let cl = content_loss_node(&mut g, &a, &hats).unwrap();
        let grams: Vec<Tensor<f64>> = a.iter().map(gram).collect();
        let sl = style_loss_node(&mut g, &grams, &hats).unwrap();
        assert_scalar_close(g.value(cl).data()[0], content(&a, &b), TOL, "content");
        assert_scalar_close(g.value(sl).data()[0], style(&a, &b), TOL, "style");
    }
}

/// Nested-loop VGG trunk returning every activation layer.
fn vgg_oracle(vgg: &Vgg16<f64>, x: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let mean = stereo_style::losses::IMAGENET_MEAN;
    let std = stereo_style::losses::IMAGENET_STD;
    let (_, _, h, w) = x.dims4();
    let mut cur = x.clone();
    for (i, v) in cur.data_mut().iter_mut().enumerate() {
        let c = i / (h * w);
        *v = (*v - mean[c]) / std[c];
    }
    let mut outs = Vec::new();
    for (name, _, _) in VGG_CONVS {
        let wt = vgg.params().get(&format!("vgg.{name}.weight")).unwrap();
        let b = vgg.params().get(&format!("vgg.{name}.bias")).unwrap();
        cur = conv3x3_relu(&cur, wt, b);
        outs.push(cur.clone());
        if ["conv1_2", "conv2_2", "conv3_3"].contains(&name) {
            cur = max_pool2(&cur);
        }
    }
    outs
}

#[cfg_attr(not(acceptance_harness), test)]
fn perceptual_losses_through_extractor_match_oracle() {
    let vgg = Vgg16::<f64>::random(5);
    let layers = ["relu1_2", "relu2_2", "relu3_3", "relu4_3"];
    let idx = [1usize, 3, 6, 9];
    let mut r = rng(400);
    let x = random(&[1, 3, 8, 8], &mut r, 0.0, 1.0);
    let y = random(&[1, 3, 8, 8], &mut r, 0.0, 1.0);
    let (ox, oy) = (vgg_oracle(&vgg, &x), vgg_oracle(&vgg, &y));
    let fx = vgg.feature_tensors(&x, &layers).unwrap();
    for (l, &i) in layers.iter().zip(&idx) {
        assert_close(fx[*l].data(), ox[i].data(), TOL, l);
    }
    let targets: Vec<Tensor<f64>> = idx.iter().map(|&i| ox[i].clone()).collect();
    let hats_o: Vec<Tensor<f64>> = idx.iter().map(|&i| oy[i].clone()).collect();
    let mut g = Graph::<f64>::new();
    let yi = g.constant(y);
    let f = vgg.features_node(&mut g, yi, &layers).unwrap();
    let hats: Vec<_> = layers.iter().map(|l| f[*l]).collect();
    let cl = content_loss_node(&mut g, &targets, &hats).unwrap();
    let grams: Vec<Tensor<f64>> = targets.iter().map(gram).collect();
    let sl = style_loss_node(&mut g, &grams, &hats).unwrap();
    assert_scalar_close(g.value(cl).data()[0], content(&targets, &hats_o), TOL, "content via extractor");
    assert_scalar_close(g.value(sl).data()[0], style(&targets, &hats_o), TOL, "style via extractor");
}

#[cfg_attr(not(acceptance_harness), test)]
fn view_losses_match_oracle() {
    for seed in 0..TRIALS {
        let (c, h, w) = dims(seed);
        let mut r = rng(500 + seed);
        let a = random(&[1, c, h, w], &mut r, 0.0, 1.0);
        let b = random(&[1, c, h, w], &mut r, 0.0, 1.0);
        let t = [
            ViewTargets { offset: random_offsets(h, w, &mut r, 3.0), mask: random_mask(h, w, &mut r) },
            ViewTargets { offset: random_offsets(h, w, &mut r, 3.0), mask: random_mask(h, w, &mut r) },
        ];
        let mut g = Graph::<f64>::new();
        let (an, bn) = (g.constant(a.clone()), g.constant(b.clone()));
        let one = masked_view_term(&mut g, an, bn, &t[0].offset, &t[0].mask).unwrap();
        let both = view_loss_node(&mut g, [an, bn], &t).unwrap();
        let o1 = masked_view(&a, &b, &t[0].offset, &t[0].mask);
        let o2 = o1 + masked_view(&b, &a, &t[1].offset, &t[1].mask);
        assert_scalar_close(g.value(one).data()[0], o1, TOL, "masked view term");
        assert_scalar_close(g.value(both).data()[0], o2, TOL, "bidirectional view loss");
    }
}

fn image_from(t: &Tensor<f64>) -> Image {
    let (_, _, h, w) = t.dims4();
    Image::new(h, w, t.data().iter().map(|&v| v as f32).collect()).unwrap()
}

#[cfg_attr(not(acceptance_harness), test)]
fn image_view_loss_matches_oracle() {
    for seed in 0..TRIALS {
        let (_, h, w) = dims(seed);
        let mut r = rng(600 + seed);
        let l = random(&[1, 3, h, w], &mut r, 0.0, 1.0);
        let rt = random(&[1, 3, h, w], &mut r, 0.0, 1.0);
        let (li, ri) = (image_from(&l), image_from(&rt));
        let dl = random(&[1, 1, h, w], &mut r, 0.0, 3.0).cast::<f32>();
        let dr = random(&[1, 1, h, w], &mut r, 0.0, 3.0).cast::<f32>();
        let ml = random_mask(h, w, &mut r);
        let mr = random_mask(h, w, &mut r);
        let dmap = |d: &Tensor<f32>, v| DisparityMap::new(h, w, d.data().to_vec(), v).unwrap();
        let mmap = |m: &Tensor<f64>, v| ConfidenceMask::new(h, w, m.data().iter().map(|&x| x as u8).collect(), v).unwrap();
        let got = image_view_loss(
            &li,
            &ri,
            &dmap(&dl, View::Left),
            &dmap(&dr, View::Right),
            &mmap(&ml, View::Left),
            &mmap(&mr, View::Right),
        )
        .unwrap();
        let (l64, r64) = (li.to_tensor::<f64>(), ri.to_tensor::<f64>());
        let off_l = dl.cast::<f64>();
        let off_r = dr.cast::<f64>().map(|v| -v);
        let expect = masked_view(&l64, &r64, &off_l, &ml) + masked_view(&r64, &l64, &off_r, &mr);
        assert_scalar_close(got, expect, TOL, "image view loss");
    }
}

#[cfg_attr(not(acceptance_harness), test)]
fn gated_aggregation_matches_oracle() {
    let weights = StylizerWeights::<f64>::init(Aggregation::WarpGateConcat, 9);
    for seed in 0..TRIALS {
        use rand::Rng;
        let mut r = rng(700 + seed);
        let c = r.gen_range(1..=6);
        let (fh, fw) = (2, 2);
        let (h, w) = (4 * fh, 4 * fw);
        let fs = random(&[1, c, fh, fw], &mut r, -1.0, 1.0);
        let fo = random(&[1, c, fh, fw], &mut r, -1.0, 1.0);
        let xs = random(&[1, 3, h, w], &mut r, 0.0, 1.0);
        let xo = random(&[1, 3, h, w], &mut r, 0.0, 1.0);
        let off = random_offsets(h, w, &mut r, 6.0);

        // Oracle: offset and images at feature resolution, warp, gate, blend.
        let small = resize(&off, fh, fw).map(|v| v * fw as f64 / w as f64);
        let warped = warp(&fo, &small);
        let ro = warp(&resize(&xo, fh, fw), &small);
        let rs = resize(&xs, fh, fw);
        let diff = rs.zip_map(&ro, |a, b| (a - b).abs());

        let mut g = Graph::<f64>::new();
        let ids = [fs.clone(), fo, xs, xo, off].map(|t| g.constant(t));
        let agg = aggregate_node(&mut g, &weights, ids[0], ids[1], ids[2], ids[3], Some(ids[4]), false).unwrap();
        let gate = g.value(agg.gate.unwrap()).clone();
        let d = g.constant(diff);
        let gate_ref = gate_node(&mut g, &weights, d, false).unwrap();
        assert_close(gate.data(), g.value(gate_ref).data(), TOL, "gate input");

        let mut expect = fs.data().to_vec();
        for ch in 0..c {
            for p in 0..fh * fw {
                let gv = gate.data()[p];
                let i = ch * fh * fw + p;
                expect.push(gv * warped.data()[i] + (1.0 - gv) * fs.data()[i]);
            }
        }
        assert_close(g.value(agg.features).data(), &expect, TOL, "aggregated features");
    }
}

#[cfg_attr(not(acceptance_harness), test)]
fn refine_matches_oracle() {
    for seed in 0..TRIALS {
        let (c, h, w) = dims(seed);
        let mut r = rng(800 + seed);
        let wv = random(&[1, c, h, w], &mut r, -1.0, 1.0);
        let sv = random(&[1, c, h, w], &mut r, -1.0, 1.0);
        let gv = random(&[1, 1, h, w], &mut r, 0.0, 1.0);
        let mut g = Graph::<f64>::new();
        let (a, b, gg) = (g.constant(wv.clone()), g.constant(sv.clone()), g.constant(gv.clone()));
        let out = refine(&mut g, a, b, gg);
        let expect: Vec<f64> = (0..c * h * w)
            .map(|i| {
                let gate = gv.data()[i % (h * w)];
                gate * wv.data()[i] + (1.0 - gate) * sv.data()[i]
            })
            .collect();
        assert_close(g.value(out).data(), &expect, TOL, "refine");
    }
}

#[cfg_attr(not(acceptance_harness), test)]
fn inconsistency_map_matches_oracle() {
    for seed in 0..TRIALS {
        let (_, h, w) = dims(seed);
        let mut r = rng(900 + seed);
        let l = image_from(&random(&[1, 3, h, w], &mut r, 0.0, 1.0));
        let rt = image_from(&random(&[1, 3, h, w], &mut r, 0.0, 1.0));
        let d = random(&[1, 1, h, w], &mut r, 0.0, 3.0).cast::<f32>();
        let m = random_mask(h, w, &mut r);
        let dmap = DisparityMap::new(h, w, d.data().to_vec(), View::Left).unwrap();
        let mmap = ConfidenceMask::new(h, w, m.data().iter().map(|&x| x as u8).collect(), View::Left).unwrap();
        let got: Vec<f64> = view_inconsistency_map(&l, &rt, &dmap, &mmap).unwrap().iter().map(|&v| v as f64).collect();
        let (l64, r64) = (l.to_tensor::<f64>(), rt.to_tensor::<f64>());
        let wr = warp(&r64, &d.cast::<f64>());
        let expect: Vec<f64> = (0..h * w)
            .map(|p| m.data()[p] * (0..3).map(|c| (l64.data()[c * h * w + p] - wr.data()[c * h * w + p]).abs()).sum::<f64>())
            .collect();
        // Computed in f32: compare at single-precision resolution.
        assert_close(&got, &expect, 1e-6 * 8.0, "inconsistency map");
    }
}

/// Every check in this file, for the acceptance harness.
#[allow(dead_code)]
pub const CHECKS: &[(&str, fn())] = &[
    ("warp_matches_oracle", warp_matches_oracle),
    ("public_warp_matches_oracle", public_warp_matches_oracle),
    ("gram_matches_oracle", gram_matches_oracle),
    ("content_and_style_match_oracle", content_and_style_match_oracle),
    ("perceptual_losses_through_extractor_match_oracle", perceptual_losses_through_extractor_match_oracle),
    ("view_losses_match_oracle", view_losses_match_oracle),
    ("image_view_loss_matches_oracle", image_view_loss_matches_oracle),
    ("gated_aggregation_matches_oracle", gated_aggregation_matches_oracle),
    ("refine_matches_oracle", refine_matches_oracle),
    ("inconsistency_map_matches_oracle", inconsistency_map_matches_oracle),
];
