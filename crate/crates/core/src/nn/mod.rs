//! Parameter storage, the execution [`Backend`] abstraction and the composite
//! layers built on top of it.
//!
//! Layers are plain descriptions (parameter names plus hyperparameters). Their
//! `forward` methods are generic over [`Backend`], so the same code drives real
//! execution on a [`Graph`] through [`Forward`] and the shape-only walk used by
//! the complexity profiler.

mod blocks;

#[cfg(test)]
mod tests;

pub use blocks::{
    flatten_positions, spp_flatten, spp_pyramid, BatchNorm, Conv, ConvBnAct, DsConv, GhostConv, GhostConvConfig,
    GhostKernels, InvertedResidual, InvertedResidualConfig, SeBlock, SppConfig, SE_REDUCTION,
};

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::norm::{self, BatchStats};
use crate::kernels::{Activation, BnSpec, ConvSpec};
use crate::tensor::{Element, Shape, Tensor};

/// Whether a stored tensor is optimized by gradient descent or is a buffer
/// updated by other means (batch-norm running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Trainable,
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry<T: Element> {
    pub tensor: Tensor<T>,
    pub role: Role,
}

/// Named model tensors, ordered by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element = f32> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, role: Role) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, Entry { tensor, role });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn role(&self, name: &str) -> Option<Role> {
        self.entries.get(name).map(|e| e.role)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Entry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter()
            .filter(|(_, e)| e.role == Role::Trainable)
            .map(|(k, e)| (k, &e.tensor))
    }

    /// Total element count over all entries, buffers included.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tensor: e.tensor.cast(),
                            role: e.role,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Parameter initialization during layer construction.
pub struct Init<'a, T: Element> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Element> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Init { store, rng }
    }

    /// Kaiming-normal with fan-out scaling: `std = sqrt(2 / (cout * kh * kw))`.
    pub fn kaiming(&mut self, name: &str, shape: Shape) -> Result<()> {
        let [cout, _, kh, kw] = shape.dims();
        let std = (2.0 / (cout * kh * kw).max(1) as f64).sqrt();
        self.normal(name, shape, std)
    }

    pub fn normal(&mut self, name: &str, shape: Shape, std: f64) -> Result<()> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let data = (0..shape.numel()).map(|_| T::of(dist.sample(&mut *self.rng))).collect();
        self.store.insert(name, Tensor::from_vec(shape, data)?, Role::Trainable)
    }

    pub fn uniform(&mut self, name: &str, shape: Shape, bound: f64) -> Result<()> {
        let data = (0..shape.numel())
            .map(|_| T::of(self.rng.random_range(-bound..=bound)))
            .collect();
        self.store.insert(name, Tensor::from_vec(shape, data)?, Role::Trainable)
    }

    pub fn constant(&mut self, name: &str, shape: Shape, value: f64, role: Role) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, T::of(value)), role)
    }
}

/// Execution target for layer code.
pub trait Backend {
    type Value: Copy;

    fn shape(&self, v: Self::Value) -> Shape;
    fn is_training(&self) -> bool;

    fn param(&mut self, name: &str) -> Result<Self::Value>;

    fn conv2d(&mut self, x: Self::Value, w: Self::Value, b: Option<Self::Value>, spec: ConvSpec)
        -> Result<Self::Value>;
    /// Batch norm whose parameters and buffers live under `prefix`.
    fn batch_norm(&mut self, prefix: &str, x: Self::Value, spec: &BnSpec) -> Result<Self::Value>;
    fn activation(&mut self, x: Self::Value, kind: Activation) -> Self::Value;
    fn add(&mut self, a: Self::Value, b: Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: Self::Value, b: Self::Value) -> Result<Self::Value>;
    fn mul_channel(&mut self, x: Self::Value, gate: Self::Value) -> Result<Self::Value>;
    fn global_avg_pool(&mut self, x: Self::Value) -> Self::Value;
    fn adaptive_max_pool(&mut self, x: Self::Value, out_h: usize, out_w: usize) -> Result<Self::Value>;
    /// Bilinear resize with half-pixel centers (`align_corners = false`).
    fn bilinear(&mut self, x: Self::Value, out_h: usize, out_w: usize) -> Result<Self::Value>;
    fn matmul(&mut self, a: Self::Value, b: Self::Value) -> Result<Self::Value>;
    fn transpose_hw(&mut self, x: Self::Value) -> Self::Value;
    fn reshape(&mut self, x: Self::Value, shape: Shape) -> Result<Self::Value>;
    fn concat_channels(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn concat_width(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn select_channels(&mut self, x: Self::Value, idx: &[usize]) -> Result<Self::Value>;
    fn softmax(&mut self, x: Self::Value) -> Result<Self::Value>;

    /// Opens a named layer scope; used for per-layer reporting.
    fn enter(&mut self, _scope: &str) {}
    fn exit(&mut self) {}
}

/// Runs layers on a [`Graph`], resolving parameter names against a
/// [`ParamStore`].
pub struct Forward<'a, T: Element> {
    pub graph: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    vars: BTreeMap<String, Var>,
    train: bool,
    track: bool,
    bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Element> Forward<'a, T> {
    /// `track` marks parameters as requiring gradients.
    pub fn new(graph: &'a mut Graph<T>, store: &'a ParamStore<T>, train: bool, track: bool) -> Self {
        Forward {
            graph,
            store,
            vars: BTreeMap::new(),
            train,
            track,
            bn_stats: Vec::new(),
        }
    }

    /// Uses pre-existing graph leaves for the named parameters instead of
    /// creating new ones. Names missing from `bound` fall back to the store.
    pub fn with_bound(mut self, bound: BTreeMap<String, Var>) -> Self {
        self.vars = bound;
        self
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.leaf(t, false)
    }

    /// Parameter leaves created or used so far.
    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Batch statistics gathered by training-mode batch norms, keyed by prefix.
    pub fn take_bn_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_stats)
    }
}

/// Applies gathered batch statistics to the running buffers in `store`.
pub fn apply_bn_stats<T: Element>(
    store: &mut ParamStore<T>,
    stats: &[(String, BatchStats<T>)],
    momentum: f64,
) -> Result<()> {
    for (prefix, s) in stats {
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let mut rm = store.require(&mean_name)?.clone();
        let mut rv = store.require(&var_name)?.clone();
        norm::update_running(&mut rm, &mut rv, s, momentum);
        *store.get_mut(&mean_name).expect("checked") = rm;
        *store.get_mut(&var_name).expect("checked") = rv;
    }
    Ok(())
}

impl<T: Element> Backend for Forward<'_, T> {
    type Value = Var;

    fn shape(&self, v: Var) -> Shape {
        self.graph.shape(v)
    }

    fn is_training(&self) -> bool {
        self.train
    }

    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.require(name)?.clone();
        let v = self.graph.leaf(t, self.track);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        self.graph.conv2d(x, w, b, spec)
    }

    fn batch_norm(&mut self, prefix: &str, x: Var, spec: &BnSpec) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.weight"))?;
        let beta = self.param(&format!("{prefix}.bias"))?;
        let rm = self.store.require(&format!("{prefix}.running_mean"))?;
        let rv = self.store.require(&format!("{prefix}.running_var"))?;
        let (y, stats) = self.graph.batch_norm(x, gamma, beta, rm, rv, spec, self.train)?;
        if let Some(s) = stats {
            self.bn_stats.push((prefix.to_string(), s));
        }
        Ok(y)
    }

    fn activation(&mut self, x: Var, kind: Activation) -> Var {
        self.graph.activation(x, kind)
    }

    fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.graph.add(a, b)
    }

    fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.graph.mul(a, b)
    }

    fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        self.graph.mul_channel(x, gate)
    }

    fn global_avg_pool(&mut self, x: Var) -> Var {
        self.graph.global_avg_pool(x)
    }

    fn adaptive_max_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.graph.adaptive_max_pool(x, out_h, out_w)
    }

    fn bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.graph.bilinear(x, out_h, out_w, false)
    }

    fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.graph.matmul(a, b)
    }

    fn transpose_hw(&mut self, x: Var) -> Var {
        self.graph.transpose_hw(x)
    }

    fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        self.graph.reshape(x, shape)
    }

    fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.graph.concat_channels(parts)
    }

    fn concat_width(&mut self, parts: &[Var]) -> Result<Var> {
        self.graph.concat_width(parts)
    }

    fn select_channels(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.graph.select_channels(x, idx)
    }

    fn softmax(&mut self, x: Var) -> Result<Var> {
        self.graph.softmax(x)
    }
}
