//! Named parameter storage, the per-step forward graph, shared layer blocks
//! and the Adam optimizer.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::autograd::{BatchStats, Gradients, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by the optimizer.
    Weight,
    /// Non-trainable state (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub value: Arc<Tensor<T>>,
    pub kind: ParamKind,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) {
        self.entries.insert(name.into(), ParamEntry { value: Arc::new(value), kind });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| e.value.as_ref())
            .ok_or_else(|| Error::Argument(format!("missing parameter `{name}`")))
    }

    pub(crate) fn entry(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Argument(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("missing parameter `{name}`")))?;
        if e.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = Arc::new(value);
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| Arc::make_mut(&mut e.value))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), ParamEntry { value: Arc::new(e.value.cast()), kind: e.kind }))
                .collect(),
        }
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, e)| (k.clone(), e.clone()))
                .collect(),
        }
    }

    /// Copies every entry of `other` into `self`, replacing existing names.
    pub fn merge(&mut self, other: &ParamStore<T>) {
        for (k, e) in &other.entries {
            self.entries.insert(k.clone(), e.clone());
        }
    }

    /// Bit-exact equality of all entries under `prefix`.
    pub fn equal_under(&self, other: &ParamStore<T>, prefix: &str) -> bool {
        let a: Vec<_> = self.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
        let b: Vec<_> = other.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((ka, ea), (kb, eb))| {
                ka == kb
                    && ea.value.shape() == eb.value.shape()
                    && ea
                        .value
                        .data()
                        .iter()
                        .zip(eb.value.data())
                        .all(|(x, y)| x.to_bits_u64() == y.to_bits_u64())
            })
    }
}

impl<T: Real> PartialEq for ParamStore<T> {
    /// Bit-exact comparison of names, kinds, shapes and values.
    fn eq(&self, other: &Self) -> bool {
        self.entries.iter().zip(&other.entries).all(|((_, a), (_, b))| a.kind == b.kind) && self.equal_under(other, "")
    }
}

/// Bit pattern access used for exact comparisons.
pub trait Bits {
    fn to_bits_u64(self) -> u64;
}

impl<T: Real> Bits for T {
    fn to_bits_u64(self) -> u64 {
        // f64 holds every f32 exactly, so this is injective for both types.
        self.as_f64().to_bits()
    }
}

/// A pending running-statistics update from a batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub prefix: String,
    pub stats: BatchStats<T>,
}

/// One recorded layer output shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub layer: String,
    pub shape: Vec<usize>,
}

/// Everything one forward pass produces besides node values.
pub struct Graph<T> {
    pub tape: Tape<T>,
    params: Vec<(String, NodeId)>,
    bn_updates: Vec<BnUpdate<T>>,
    trace: Option<Vec<TraceEntry>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { tape: Tape::new(), params: Vec::new(), bn_updates: Vec::new(), trace: None }
    }

    /// Graph that records every layer's output shape.
    pub fn with_trace() -> Self {
        Graph { trace: Some(Vec::new()), ..Self::new() }
    }

    pub fn trace(&self) -> Option<&[TraceEntry]> {
        self.trace.as_deref()
    }

    pub(crate) fn record(&mut self, layer: &str, node: NodeId) {
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceEntry { layer: layer.to_string(), shape: self.tape.value(node).shape().to_vec() });
        }
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.tape.constant(t)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.tape.value(id)
    }

    /// Sums gradients per parameter name (a parameter may feed several leaves).
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (name, id) in &self.params {
            if let Some(g) = grads.get(*id) {
                match out.get_mut(name) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        out.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        out
    }

    /// Folds recorded batch statistics into the running statistics of `store`.
    pub fn apply_bn_updates(&self, store: &mut ParamStore<T>) -> Result<()> {
        let m = T::lit(BN_MOMENTUM);
        for u in &self.bn_updates {
            for (suffix, stat) in [("running_mean", &u.stats.mean), ("running_var", &u.stats.var)] {
                let name = format!("{}.{suffix}", u.prefix);
                let t = store
                    .get_mut(&name)
                    .ok_or_else(|| Error::Argument(format!("missing buffer `{name}`")))?;
                for (r, &s) in t.data_mut().iter_mut().zip(stat) {
                    *r = (T::one() - m) * *r + m * s;
                }
            }
        }
        Ok(())
    }
}

/// Parameter namespace plus the mode in which its layers run.
#[derive(Clone)]
pub struct Scope<'s, T> {
    pub store: &'s ParamStore<T>,
    pub prefix: String,
    /// Normalize with batch statistics instead of running ones. Running
    /// statistics are only updated for trainable scopes.
    pub batch_stats: bool,
    /// Parameters receive gradients.
    pub trainable: bool,
}

impl<'s, T: Real> Scope<'s, T> {
    pub fn new(store: &'s ParamStore<T>, prefix: &str, batch_stats: bool, trainable: bool) -> Self {
        Scope { store, prefix: prefix.to_string(), batch_stats, trainable }
    }

    pub fn sub(&self, name: &str) -> Scope<'s, T> {
        Scope { prefix: format!("{}.{name}", self.prefix), ..self.clone() }
    }

    pub fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn param(&self, g: &mut Graph<T>, leaf: &str) -> Result<NodeId> {
        let name = self.name(leaf);
        let entry = self.store.entry(&name)?;
        let trainable = self.trainable && entry.kind == ParamKind::Weight;
        let id = g.tape.shared_leaf(Arc::clone(&entry.value), trainable);
        if trainable {
            g.params.push((name, id));
        }
        Ok(id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

pub fn activate<T: Real>(g: &mut Graph<T>, x: NodeId, act: Activation) -> NodeId {
    match act {
        Activation::Relu => g.tape.relu(x),
        Activation::Tanh => g.tape.tanh(x),
        Activation::None => x,
    }
}

/// Batch normalization under `scope` (`gamma`, `beta`, running buffers).
pub fn batch_norm<T: Real>(g: &mut Graph<T>, scope: &Scope<'_, T>, x: NodeId) -> Result<NodeId> {
    let gamma = scope.param(g, "gamma")?;
    let beta = scope.param(g, "beta")?;
    let eps = T::lit(BN_EPS);
    if scope.batch_stats {
        let (y, stats) = g.tape.batch_norm_train(x, gamma, beta, eps);
        if scope.trainable {
            g.bn_updates.push(BnUpdate { prefix: scope.prefix.clone(), stats });
        }
        Ok(y)
    } else {
        let mean = scope.store.get(&scope.name("running_mean"))?.data().to_vec();
        let var = scope.store.get(&scope.name("running_var"))?.data().to_vec();
        Ok(g.tape.batch_norm_eval(x, gamma, beta, &mean, &var, eps))
    }
}

/// Glorot (normalized) uniform sample for a tensor with the given fans.
pub fn glorot_uniform<T: Real>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-limit..limit))).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

/// Registers `gamma`, `beta` and running buffers for a normalization layer.
pub fn init_batch_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[channels], T::one()), ParamKind::Weight);
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]), ParamKind::Weight);
    store.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer);
    store.insert(format!("{prefix}.running_var"), Tensor::full(&[channels], T::one()), ParamKind::Buffer);
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let step_size = T::lit(self.lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(self.eps);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Argument(format!("gradient for unknown parameter `{name}`")))?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step_size * *mv / (vv.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
