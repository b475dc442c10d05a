use std::collections::BTreeMap;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named trainable parameters plus non-trainable buffers (running statistics,
/// metadata). Both maps are ordered so iteration is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub trainable: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.trainable
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown buffer {name}")))
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable.values().map(Tensor::len).sum()
    }
}

/// Lazily places parameters from a [`ParamStore`] onto a [`Graph`].
///
/// Only parameters actually requested end up on the tape, so parameters not
/// touched by a step receive no gradient and are skipped by the optimizer.
pub struct Binder<'a> {
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Binder {
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self
            .store
            .trainable
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown trainable parameter {name}")))?;
        let v = g.param(t.clone());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Collects gradients for every bound parameter that influenced the root.
    pub fn gradients(&self, grads: &super::Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(name, v)| grads.get(*v).map(|t| (name.clone(), t)))
            .collect()
    }
}
