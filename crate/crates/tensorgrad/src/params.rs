use std::collections::HashMap;

use crate::error::{GradError, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to an entry of a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Buffers (batch-norm running statistics) are stored but never optimized.
    pub trainable: bool,
}

/// Flat, ordered, named parameter store. Insertion order is the checkpoint order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(GradError::Contract(format!("duplicate parameter name {name}")));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, tensor, trainable });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| ParamId(i))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Same names and shapes in the other precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub(crate) fn overwrite(&mut self, id: ParamId, values: Vec<T>) {
        let t = &mut self.entries[id.0].tensor;
        debug_assert_eq!(t.numel(), values.len());
        t.data_mut().copy_from_slice(&values);
    }

    /// Applies running-statistic updates recorded by a training-mode forward pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Vec<T>)>) {
        for (id, values) in updates {
            self.overwrite(id, values);
        }
    }
}

/// One gradient vector per store entry; buffers and unused parameters hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub grads: Vec<Vec<T>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store.entries().iter().map(|e| vec![T::zero(); e.tensor.numel()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    /// Element-wise accumulation, used to combine micro-batches.
    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in &mut self.grads {
            for x in g.iter_mut() {
                *x = *x * factor;
            }
        }
    }
}
