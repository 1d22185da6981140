//! Named parameter storage and graph binding.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, Scalar, Tensor, Var};

/// Which part of the model a parameter belongs to; drives the trainable set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// ViT weights that are never trained.
    VitFrozen,
    /// Layernorms inside the ViT transformer blocks.
    VitBlockNorm,
    /// The two layernorms of the ViT neck.
    VitNeckNorm,
    Cnn,
    Decoder,
}

impl ParamGroup {
    pub fn is_vit(self) -> bool {
        matches!(
            self,
            ParamGroup::VitFrozen | ParamGroup::VitBlockNorm | ParamGroup::VitNeckNorm
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::VitFrozen => "vit_frozen",
            ParamGroup::VitBlockNorm => "vit_block_norm",
            ParamGroup::VitNeckNorm => "vit_neck_norm",
            ParamGroup::Cnn => "cnn",
            ParamGroup::Decoder => "decoder",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) {
        self.entries.insert(name.into(), Param { value, group });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn names_in(&self, group: ParamGroup) -> BTreeSet<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        Param {
                            value: p.value.cast(),
                            group: p.group,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Parameter initialization helpers. All draws come from the caller's rng in
/// call order, so a fixed seed fixes every weight.
pub struct Init<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    pub fn uniform(&mut self, name: &str, group: ParamGroup, shape: &[usize], bound: f64) {
        let t = Tensor::from_fn(shape, |_| T::of(self.rng.random_range(-bound..=bound)));
        self.store.insert(name, group, t);
    }

    pub fn normal(&mut self, name: &str, group: ParamGroup, shape: &[usize], std: f64) {
        let d = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let t = Tensor::from_fn(shape, |_| T::of(d.sample(self.rng)));
        self.store.insert(name, group, t);
    }

    pub fn constant(&mut self, name: &str, group: ParamGroup, shape: &[usize], value: f64) {
        self.store.insert(name, group, Tensor::full(shape, T::of(value)));
    }

    /// `[in, out]` weight plus `[out]` bias, both `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn linear(&mut self, prefix: &str, group: ParamGroup, d_in: usize, d_out: usize) {
        let bound = 1.0 / (d_in as f64).sqrt();
        self.uniform(&format!("{prefix}.weight"), group, &[d_in, d_out], bound);
        self.uniform(&format!("{prefix}.bias"), group, &[d_out], bound);
    }

    pub fn conv(
        &mut self,
        prefix: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias: bool,
    ) {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        self.uniform(&format!("{prefix}.weight"), group, &[c_out, c_in, k, k], bound);
        if bias {
            self.uniform(&format!("{prefix}.bias"), group, &[c_out], bound);
        }
    }

    /// Transposed conv weight `[c_in, c_out, k, k]` plus bias.
    pub fn conv_transpose(&mut self, prefix: &str, group: ParamGroup, c_in: usize, c_out: usize, k: usize) {
        let bound = 1.0 / ((c_out * k * k) as f64).sqrt();
        self.uniform(&format!("{prefix}.weight"), group, &[c_in, c_out, k, k], bound);
        self.uniform(&format!("{prefix}.bias"), group, &[c_out], bound);
    }

    pub fn layernorm(&mut self, prefix: &str, group: ParamGroup, dim: usize) {
        self.constant(&format!("{prefix}.gain"), group, &[dim], 1.0);
        self.constant(&format!("{prefix}.bias"), group, &[dim], 0.0);
    }
}

/// One forward pass: binds named parameters into a graph on first use.
pub struct Session<'g, 'p, T: Scalar> {
    pub graph: &'g mut Graph<T>,
    params: &'p ParamStore<T>,
    trainable: Option<&'p BTreeSet<String>>,
    bound: BTreeMap<String, Var>,
}

impl<'g, 'p, T: Scalar> Session<'g, 'p, T> {
    /// Every parameter binds as a constant.
    pub fn frozen(graph: &'g mut Graph<T>, params: &'p ParamStore<T>) -> Self {
        Self {
            graph,
            params,
            trainable: None,
            bound: BTreeMap::new(),
        }
    }

    /// Parameters in `trainable` bind with `requires_grad`.
    pub fn training(
        graph: &'g mut Graph<T>,
        params: &'p ParamStore<T>,
        trainable: &'p BTreeSet<String>,
    ) -> Self {
        Self {
            graph,
            params,
            trainable: Some(trainable),
            bound: BTreeMap::new(),
        }
    }

    /// Pre-bind parameters to existing graph nodes (overrides the store).
    pub fn with_bound(mut self, bound: impl IntoIterator<Item = (String, Var)>) -> Self {
        self.bound.extend(bound);
        self
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let value = self.params.value(name)?.clone();
        let rg = self.trainable.is_some_and(|t| t.contains(name));
        let v = self.graph.leaf(value, rg);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.bound.contains_key(name) || self.params.contains(name)
    }

    /// Gradients of every bound parameter that required grad.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter(|(_, v)| self.graph.requires_grad(**v))
            .map(|(n, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.graph.shape(*v)));
                (n.clone(), g)
            })
            .collect()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }
}
