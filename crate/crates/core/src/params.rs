//! Named parameter storage.
//!
//! Parameters live outside any tape and persist across training steps. A
//! `BTreeMap` keeps iteration order deterministic, which matters for
//! finite-difference sweeps, optimizer updates, and checkpoint layout.

use std::collections::BTreeMap;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Insert a trainable parameter. Panics on duplicate names.
    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        let prev = self.params.insert(name.to_string(), tensor.with_grad());
        assert!(prev.is_none(), "contract error: duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params.get(name).unwrap_or_else(|| panic!("contract error: unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params.get_mut(name).unwrap_or_else(|| panic!("contract error: unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn zero_grad(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }
}

/// Per-step binding of every parameter onto a tape.
///
/// Created at the start of a forward pass; after `backward`, call
/// [`Bound::pull_grads`] to accumulate tape gradients back into the store.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn bind(tape: &mut Tape, store: &ParamStore) -> Self {
        let mut vars = BTreeMap::new();
        for (name, tensor) in store.iter() {
            vars.insert(name.clone(), tape.leaf(tensor));
        }
        Bound { vars }
    }

    /// Tape handle for a parameter. Panics on unknown names.
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("contract error: unbound parameter {name}"))
    }

    /// Accumulate gradients from the tape into every parameter that received
    /// one. Parameters untouched by the loss keep their previous grad state.
    pub fn pull_grads(&self, tape: &Tape, store: &mut ParamStore) {
        for (name, var) in &self.vars {
            if let Some(g) = tape.grad(*var) {
                store.get_mut(name).accumulate_grad(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_params_receive_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![3.0, -1.0]));
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let w = bound.var("w");
        let sq = tape.mul(w, w);
        let loss = tape.sum_all(sq);
        tape.backward(loss);
        bound.pull_grads(&tape, &mut store);
        assert_eq!(store.get("w").grad.as_deref().unwrap(), &[6.0, -2.0]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(vec![1]));
        store.insert("w", Tensor::zeros(vec![1]));
    }
}
