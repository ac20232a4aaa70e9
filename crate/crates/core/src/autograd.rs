//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! constants or parameters (shared through `Arc`, so large frozen weights are
//! never copied). [`Tape::backward`] walks the tape in reverse and returns the
//! gradient of a scalar root with respect to every node that requires one.

use std::sync::Arc;

use crate::conv;
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulBcast(NodeId, NodeId),
    Affine(NodeId, T),
    Abs(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Clamp(NodeId, T, T),
    Square(NodeId),
    Sum(NodeId),
    Concat(Vec<NodeId>),
    ChannelAffine(NodeId, Vec<T>),
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    ConvT { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    ReflectPad(NodeId, usize),
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor<T>, inv_std: Vec<T>, batch_stats: bool },
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    Warp { src: NodeId, offset: NodeId },
    Resize(NodeId),
    Gram(NodeId),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics produced by a batch-statistics normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the quantity tracked by running statistics.
    pub var: Vec<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Bilinear sampling coordinates along one axis for align-corners=false resizing.
pub(crate) fn resize_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i0 == i1 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
    r as usize
}

/// Horizontal sampling site for a warp: the source column `x - offset` split
/// into a base index and fraction, or `None` when it leaves `[0, W-1]`.
#[inline]
pub(crate) fn warp_site<T: Real>(x: usize, offset: T, width: usize) -> Option<(usize, T)> {
    let pos = T::lit(x as f64) - offset;
    if !(pos >= T::zero() && pos <= T::lit((width - 1) as f64)) {
        return None;
    }
    let x0 = pos.floor();
    let frac = pos - x0;
    Some((x0.to_usize().unwrap_or(0).min(width - 1), frac))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shared(&self, id: NodeId) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[id.0].value)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.rg(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf sharing storage with an existing tensor.
    pub fn shared_leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// `x [N,C,H,W] * g [N,1,H,W]`, broadcasting `g` over channels.
    pub fn mul_bcast(&mut self, x: NodeId, g: NodeId) -> NodeId {
        let xv = self.value(x);
        let gv = self.value(g);
        let (n, c, h, w) = xv.dims4();
        assert_eq!(gv.shape(), &[n, 1, h, w], "mul_bcast gate shape");
        let mut out = xv.clone();
        let hw = h * w;
        for b in 0..n {
            let gp = &gv.data()[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for (o, &gg) in out.data_mut()[off..off + hw].iter_mut().zip(gp) {
                    *o *= gg;
                }
            }
        }
        let rg = self.rg(x) || self.rg(g);
        self.push(out, Op::MulBcast(x, g), rg)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: NodeId, scale: T, shift: T) -> NodeId {
        let v = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(a);
        self.push(v, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: NodeId, scale: T) -> NodeId {
        self.affine(a, scale, T::zero())
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.abs());
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> NodeId {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    /// Concatenation of NCHW tensors along channels.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let total_c: usize = parts.iter().map(|&p| self.value(p).dims4().1).sum();
        let mut data = Vec::with_capacity(n * total_c * h * w);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let (pn, pc, ph, pw) = v.dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat spatial mismatch");
                data.extend_from_slice(&v.data()[b * pc * h * w..(b + 1) * pc * h * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let v = Tensor::from_vec(&[n, total_c, h, w], data).expect("concat shape");
        self.push(v, Op::Concat(parts.to_vec()), rg)
    }

    /// Per-channel `x * scale[c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&mut self, x: NodeId, scale: &[T], shift: &[T]) -> NodeId {
        let mut v = self.value(x).clone();
        let (n, c, h, w) = v.dims4();
        assert_eq!(scale.len(), c);
        let hw = h * w;
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for o in &mut v.data_mut()[off..off + hw] {
                    *o = *o * scale[ch] + shift[ch];
                }
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::ChannelAffine(x, scale.to_vec()), rg)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let v = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(v, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> NodeId {
        let v = conv::conv_transpose2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            out_pad,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(v, Op::ConvT { x, w, b, stride, pad }, rg)
    }

    /// Reflection padding (edge pixel not repeated) on both spatial axes.
    pub fn reflect_pad(&mut self, x: NodeId, pad: usize) -> NodeId {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert!(pad < h && pad < w, "reflection pad larger than input");
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut out = Tensor::zeros(&[n, c, hp, wp]);
        for p in 0..n * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * hp * wp..(p + 1) * hp * wp];
            for y in 0..hp {
                let sy = reflect(y as isize - pad as isize, h);
                for xx in 0..wp {
                    let sx = reflect(xx as isize - pad as isize, w);
                    dst[y * wp + xx] = src[sy * w + sx];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::ReflectPad(x, pad), rg)
    }

    /// Batch normalization using the statistics of this batch.
    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> (NodeId, BatchStats<T>) {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let m = n * hw;
        let mut mean = vec![T::zero(); c];
        let mut var_b = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += xv.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
            }
            let mu = s / T::lit(m as f64);
            let mut ss = T::zero();
            for b in 0..n {
                for &v in &xv.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    ss += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var_b[ch] = ss / T::lit(m as f64);
        }
        let inv_std: Vec<T> = var_b.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let unbiased = var_b
            .iter()
            .map(|&v| if m > 1 { v * T::lit(m as f64 / (m - 1) as f64) } else { v })
            .collect();
        let node = self.normalize(x, gamma, beta, &mean, inv_std, true);
        (node, BatchStats { mean, var: unbiased })
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> NodeId {
        let inv_std = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, running_mean, inv_std, false)
    }

    fn normalize(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mean: &[T], inv_std: Vec<T>, batch_stats: bool) -> NodeId {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = xv.clone();
        let mut out = Tensor::zeros(xv.shape());
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let xs = &mut xhat.data_mut()[off..off + hw];
                let os = &mut out.data_mut()[off..off + hw];
                for (xh, o) in xs.iter_mut().zip(os.iter_mut()) {
                    *xh = (*xh - mean[ch]) * inv_std[ch];
                    *o = gv[ch] * *xh + bv[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, rg)
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best = 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * y + dy) * w + 2 * xx + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = p * ho * wo + y * wo + xx;
                    out.data_mut()[o] = src[best];
                    argmax[o] = p * h * w + best;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::MaxPool2 { x, argmax }, rg)
    }

    /// Horizontal backward warp: `out(c,y,x) = bilinear(src(c,y,.), x - offset(y,x))`.
    ///
    /// `offset` is `[N,1,H,W]`. Samples leaving `[0, W-1]` produce 0.
    /// Differentiable with respect to both `src` and `offset`.
    pub fn warp(&mut self, src: NodeId, offset: NodeId) -> NodeId {
        let sv = self.value(src);
        let ov = self.value(offset);
        let (n, c, h, w) = sv.dims4();
        assert_eq!(ov.shape(), &[n, 1, h, w], "warp offset shape");
        let mut out = Tensor::zeros(sv.shape());
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let Some((x0, a)) = warp_site(x, ov.data()[(b * h + y) * w + x], w) else {
                        continue;
                    };
                    for ch in 0..c {
                        let row = ((b * c + ch) * h + y) * w;
                        let v0 = sv.data()[row + x0];
                        let v = if a > T::zero() { (T::one() - a) * v0 + a * sv.data()[row + x0 + 1] } else { v0 };
                        out.data_mut()[row + x] = v;
                    }
                }
            }
        }
        let rg = self.rg(src) || self.rg(offset);
        self.push(out, Op::Warp { src, offset }, rg)
    }

    /// Bilinear (align-corners=false) spatial resize.
    pub fn resize_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let ys = resize_axis(h, out_h);
        let xs = resize_axis(w, out_w);
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        for p in 0..n * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let fy = T::lit(fy);
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let fx = T::lit(fx);
                    let top = (T::one() - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
                    let bot = (T::one() - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
                    dst[oy * out_w + ox] = (T::one() - fy) * top + fy * bot;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Resize(x), rg)
    }

    /// Gram matrix `[N,C,C]`, `G_ij = (1/HW) sum_p F_ip F_jp`.
    pub fn gram(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c, c]);
        let scale = T::one() / T::lit(hw as f64);
        for b in 0..n {
            let f = &xv.data()[b * c * hw..(b + 1) * c * hw];
            crate::tensor::gemm(
                scale,
                crate::tensor::MatRef::new(f, c, hw),
                crate::tensor::MatRef::transposed(f, c, hw),
                T::zero(),
                &mut out.data_mut()[b * c * c..(b + 1) * c * c],
            );
        }
        let rg = self.rg(x);
        self.push(out, Op::Gram(x), rg)
    }

    /// Gradient of the scalar `root` with respect to every node that requires one.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        assert_eq!(self.value(root).numel(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::MulBcast(x, gate) => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                let (n, c, h, w) = xv.dims4();
                let hw = h * w;
                if self.rg(*x) {
                    let mut gx = g.clone();
                    for b in 0..n {
                        let gp = &gv.data()[b * hw..(b + 1) * hw];
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for (o, &gg) in gx.data_mut()[off..off + hw].iter_mut().zip(gp) {
                                *o *= gg;
                            }
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.rg(*gate) {
                    let mut gg = Tensor::zeros(gv.shape());
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let dst = &mut gg.data_mut()[b * hw..(b + 1) * hw];
                            for p in 0..hw {
                                dst[p] += g.data()[off + p] * xv.data()[off + p];
                            }
                        }
                    }
                    accumulate(grads, *gate, gg);
                }
            }
            Op::Affine(a, s) => {
                let s = *s;
                accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, g.zip_map(av, |gv, x| if x > T::zero() { gv } else if x < T::zero() { -gv } else { T::zero() }));
            }
            Op::Relu(a) => {
                accumulate(grads, *a, g.zip_map(out, |gv, o| if o > T::zero() { gv } else { T::zero() }));
            }
            Op::Tanh(a) => {
                accumulate(grads, *a, g.zip_map(out, |gv, o| gv * (T::one() - o * o)));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                accumulate(grads, *a, g.zip_map(self.value(*a), |gv, x| if x >= lo && x <= hi { gv } else { T::zero() }));
            }
            Op::Square(a) => {
                accumulate(grads, *a, g.zip_map(self.value(*a), |gv, x| T::lit(2.0) * x * gv));
            }
            Op::Sum(a) => {
                accumulate(grads, *a, Tensor::full(self.value(*a).shape(), g.data()[0]));
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = out.dims4();
                let hw = h * w;
                let mut c_off = 0;
                for &p in parts {
                    let pc = self.value(p).dims4().1;
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            let off = (b * total_c + c_off) * hw;
                            gp.extend_from_slice(&g.data()[off..off + pc * hw]);
                        }
                        accumulate(grads, p, Tensor::from_vec(&[n, pc, h, w], gp).expect("concat grad"));
                    }
                    c_off += pc;
                }
            }
            Op::ChannelAffine(x, scale) => {
                let mut gx = g.clone();
                let (n, c, h, w) = gx.dims4();
                let hw = h * w;
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for v in &mut gx.data_mut()[off..off + hw] {
                            *v *= scale[ch];
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::ConvT { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::ReflectPad(x, pad) => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                let mut gx = Tensor::zeros(xv.shape());
                for p in 0..n * c {
                    let src = &g.data()[p * hp * wp..(p + 1) * hp * wp];
                    let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
                    for y in 0..hp {
                        let sy = reflect(y as isize - *pad as isize, h);
                        for xx in 0..wp {
                            let sx = reflect(xx as isize - *pad as isize, w);
                            dst[sy * w + sx] += src[y * wp + xx];
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c, h, w) = xhat.dims4();
                let hw = h * w;
                let m = T::lit((n * hw) as f64);
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for p in off..off + hw {
                            sum_g[ch] += g.data()[p];
                            sum_gx[ch] += g.data()[p] * xhat.data()[p];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(xhat.shape());
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch];
                            for p in off..off + hw {
                                gx.data_mut()[p] = if *batch_stats {
                                    k * (g.data()[p] - sum_g[ch] / m - xhat.data()[p] * sum_gx[ch] / m)
                                } else {
                                    k * g.data()[p]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.rg(*gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec(&[c], sum_gx).expect("bn grad"));
                }
                if self.rg(*beta) {
                    accumulate(grads, *beta, Tensor::from_vec(&[c], sum_g).expect("bn grad"));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (o, &src) in argmax.iter().enumerate() {
                    gx.data_mut()[src] += g.data()[o];
                }
                accumulate(grads, *x, gx);
            }
            Op::Warp { src, offset } => {
                let sv = self.value(*src);
                let ov = self.value(*offset);
                let (n, c, h, w) = sv.dims4();
                let mut gs = self.rg(*src).then(|| Tensor::zeros(sv.shape()));
                let mut go = self.rg(*offset).then(|| Tensor::zeros(ov.shape()));
                for b in 0..n {
                    for y in 0..h {
                        for x in 0..w {
                            let oi = (b * h + y) * w + x;
                            let Some((x0, a)) = warp_site(x, ov.data()[oi], w) else {
                                continue;
                            };
                            let has_right = x0 + 1 < w;
                            let mut d_off = T::zero();
                            for ch in 0..c {
                                let row = ((b * c + ch) * h + y) * w;
                                let gv = g.data()[row + x];
                                if let Some(gs) = gs.as_mut() {
                                    gs.data_mut()[row + x0] += (T::one() - a) * gv;
                                    if has_right && a > T::zero() {
                                        gs.data_mut()[row + x0 + 1] += a * gv;
                                    }
                                }
                                if has_right {
                                    // d out / d pos = s[x0+1] - s[x0]; pos = x - offset.
                                    d_off -= gv * (sv.data()[row + x0 + 1] - sv.data()[row + x0]);
                                }
                            }
                            if let Some(go) = go.as_mut() {
                                go.data_mut()[oi] += d_off;
                            }
                        }
                    }
                }
                if let Some(gs) = gs {
                    accumulate(grads, *src, gs);
                }
                if let Some(go) = go {
                    accumulate(grads, *offset, go);
                }
            }
            Op::Resize(x) => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let (_, _, oh, ow) = out.dims4();
                let ys = resize_axis(h, oh);
                let xs = resize_axis(w, ow);
                let mut gx = Tensor::zeros(xv.shape());
                for p in 0..n * c {
                    let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        let fy = T::lit(fy);
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let fx = T::lit(fx);
                            let gv = src[oy * ow + ox];
                            dst[y0 * w + x0] += (T::one() - fy) * (T::one() - fx) * gv;
                            dst[y0 * w + x1] += (T::one() - fy) * fx * gv;
                            dst[y1 * w + x0] += fy * (T::one() - fx) * gv;
                            dst[y1 * w + x1] += fy * fx * gv;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Gram(x) => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let hw = h * w;
                let scale = T::one() / T::lit(hw as f64);
                let mut gx = Tensor::zeros(xv.shape());
                for b in 0..n {
                    let gg = &g.data()[b * c * c..(b + 1) * c * c];
                    let sym: Vec<T> = (0..c * c).map(|k| gg[k] + gg[(k % c) * c + k / c]).collect();
                    crate::tensor::gemm(
                        scale,
                        crate::tensor::MatRef::new(&sym, c, c),
                        crate::tensor::MatRef::new(&xv.data()[b * c * hw..(b + 1) * c * hw], c, hw),
                        T::zero(),
                        &mut gx.data_mut()[b * c * hw..(b + 1) * c * hw],
                    );
                }
                accumulate(grads, *x, gx);
            }
        }
    }
}
