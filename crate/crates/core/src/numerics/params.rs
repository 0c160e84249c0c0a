//! Named parameter collections and their binding into a [`Graph`].

use std::collections::BTreeMap;

use super::graph::{Gradients, Graph, Var};
use super::optim::{adam_step, AdamConfig, AdamState};
use super::Tensor;
use crate::{Error, Result};

/// Parameters keyed by a dotted name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copy with every value replaced by zero.
    pub fn zeroed(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.zeros_like()))
                .collect(),
        }
    }

    /// Merges `other` in, prefixing its names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Sub-set of names starting with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Inserts every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable)))
                .collect(),
        }
    }
}

/// Parameter names mapped to the graph leaves holding them.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }

    /// Pulls the gradient of every bound parameter out of `grads`. Parameters
    /// that did not influence the loss get a zero gradient.
    pub fn gradients(&self, g: &Graph, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let t = grads.remove(v).unwrap_or_else(|| g.value(v).zeros_like());
                (k.clone(), t)
            })
            .collect()
    }
}

/// Adam over a whole [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            states: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, grad) in grads {
            let p = params.get_mut(name)?;
            let st = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(p));
            adam_step(&self.cfg, st, p, grad)?;
        }
        Ok(())
    }
}
