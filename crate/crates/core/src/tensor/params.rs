use std::collections::{BTreeMap, BTreeSet};

use super::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named model tensors. Iteration order is the lexicographic name order,
/// which keeps optimizer updates and checkpoints deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    /// Inserts a tensor that never receives gradient.
    pub fn insert_frozen(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.frozen.insert(name.clone());
        self.tensors.insert(name, value);
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        if frozen {
            self.frozen.insert(name.to_string());
        } else {
            self.frozen.remove(name);
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars that receive gradient.
    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(n, _)| !self.is_frozen(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Puts every tensor on `graph`: trainable ones as leaves, frozen ones
    /// as constants.
    pub fn bind<'g>(&self, graph: &'g Graph) -> ParamVars<'g> {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let var = if self.frozen.contains(name) {
                    graph.constant(t.clone())
                } else {
                    graph.leaf(t.clone())
                };
                (name.clone(), var)
            })
            .collect();
        ParamVars { vars }
    }
}

/// The graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamVars<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> ParamVars<'g> {
    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    /// Replaces the handle for `name`, e.g. with a perturbed copy.
    pub fn set(&mut self, name: &str, var: Var<'g>) {
        self.vars.insert(name.to_string(), var);
    }

    /// Gradients of the trainable parameters that took part in the loss.
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, var)| grads.get(*var).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}
