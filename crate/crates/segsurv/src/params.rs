//! Ordered, named parameter registry.
//!
//! Names are hierarchical (`enc.l3.wq`, `dec.stage1.bn1_g`); the insertion
//! order is the canonical checkpoint order. Registering on a tape binds
//! every entry as a gradient-accumulating leaf.

use crate::autodiff::{Scalar, Tape, Tensor, TensorRef};
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter {name}"
        );
        self.entries.push((name, tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Total number of scalars across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Zeroes every parameter whose name satisfies `pred`.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, tensor) in self.entries.iter_mut() {
            if pred(name) {
                for v in tensor.data_mut() {
                    *v = T::zero();
                }
            }
        }
    }

    /// Puts every parameter on the tape as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> BoundParams {
        let mut ids = Vec::with_capacity(self.entries.len());
        let mut index = BTreeMap::new();
        for (i, (name, tensor)) in self.entries.iter().enumerate() {
            ids.push(tape.param(tensor.clone()));
            index.insert(name.clone(), i);
        }
        BoundParams { ids, index }
    }

    /// Converts values to another precision (used when loading checkpoints).
    pub fn convert<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| {
                    let data = t.data().iter().map(|&v| U::from_f64(v.to_f64())).collect();
                    (
                        n.clone(),
                        Tensor::new(t.shape().to_vec(), data).expect("same shape"),
                    )
                })
                .collect(),
        }
    }
}

/// Tape handles for a registered [`ParamStore`], keyed by name.
pub struct BoundParams {
    ids: Vec<TensorRef>,
    index: BTreeMap<String, usize>,
}

impl BoundParams {
    /// Handle for a parameter that must exist (names are constructed from
    /// the same config that built the store).
    pub fn get(&self, name: &str) -> TensorRef {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.ids[idx]
    }

    pub fn ids(&self) -> &[TensorRef] {
        &self.ids
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorRef)> {
        self.index.iter().map(move |(n, &i)| (n.as_str(), self.ids[i]))
    }
}
