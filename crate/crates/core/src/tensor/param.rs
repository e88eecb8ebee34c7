//! Named parameter collection.
//!
//! Entries keep insertion order (build order), carry a trainable flag, and
//! own the optimizer moment slots. Entries with `trainable = false` — the
//! fixed gradient-operator kernels and batch-norm running statistics — are
//! never touched by an optimizer step.

use indexmap::IndexMap;

use super::{Element, Tensor};
use crate::error::{Error, Result};

pub struct ParamEntry<E: Element> {
    pub tensor: Tensor<E>,
    pub trainable: bool,
    /// Adam first/second moment buffers, allocated on first use.
    pub moment1: Option<Vec<E>>,
    pub moment2: Option<Vec<E>>,
}

pub struct ParamStore<E: Element = f32> {
    entries: IndexMap<String, ParamEntry<E>>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    /// Registers a tensor under a unique hierarchical name and returns the
    /// shared handle. Trainable entries must track gradients.
    pub fn register(&mut self, name: &str, tensor: Tensor<E>, trainable: bool) -> Result<Tensor<E>> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        if trainable && !tensor.is_requires_grad() {
            return Err(Error::Config(format!(
                "trainable parameter {name} must require gradients"
            )));
        }
        let handle = tensor.clone();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                tensor,
                trainable,
                moment1: None,
                moment2: None,
            },
        );
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<E>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<E>> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor<E>> {
        self.entries.get(name).map(|e| e.tensor.clone())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<E>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry<E>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&self) {
        for entry in self.entries.values() {
            entry.tensor.clear_grad();
        }
    }

    /// Total element count across all entries.
    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|e| e.tensor.dims().count()).sum()
    }

    /// Element count of trainable entries only.
    pub fn trainable_elements(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.dims().count())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::<f32>::new();
        let t = Tensor::zeros(Dims::new(1, 1, 1, 1));
        store.register("a.weight", t.clone(), false).unwrap();
        assert!(store.register("a.weight", t, false).is_err());
    }

    #[test]
    fn trainable_requires_grad_tracking() {
        let mut store = ParamStore::<f32>::new();
        let plain = Tensor::zeros(Dims::new(1, 1, 1, 1));
        assert!(store.register("w", plain, true).is_err());
        let tracked = Tensor::zeros(Dims::new(1, 1, 1, 1)).requires_grad();
        assert!(store.register("w", tracked, true).is_ok());
    }

    #[test]
    fn insertion_order_preserved() {
        let mut store = ParamStore::<f32>::new();
        for name in ["z", "a", "m"] {
            store
                .register(name, Tensor::zeros(Dims::new(1, 1, 1, 1)), false)
                .unwrap();
        }
        let names: Vec<&String> = store.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["z", "a", "m"]);
    }
}
