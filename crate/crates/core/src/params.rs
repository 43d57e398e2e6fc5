//! Named parameter tensors and their gradient buffers.

use crate::error::{Error, Result};
use crate::ops::norm::{update_running, BatchStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (batch-norm running statistics) are persisted but never
    /// receive gradients.
    pub trainable: bool,
}

/// Ordered parameter collection; insertion order is the checkpoint order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T = f32> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            self.id_of(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_trainable(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn buffer_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Replaces every value with `other`'s after checking that names and
    /// shapes line up entry by entry.
    pub fn assign_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if let Some(index) = self.first_mismatch(other) {
            let describe = |e: Option<&ParamEntry<T>>| {
                e.map_or("<missing>".to_string(), |e| {
                    format!("{} {}", e.name, e.value.shape())
                })
            };
            return Err(Error::TensorMismatch {
                index,
                expected: describe(self.entries.get(index)),
                found: describe(other.entries.get(index)),
            });
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    fn first_mismatch(&self, other: &ParamStore<T>) -> Option<usize> {
        let n = self.entries.len().max(other.entries.len());
        (0..n).find(|&i| match (self.entries.get(i), other.entries.get(i)) {
            (Some(a), Some(b)) => a.name != b.name || a.value.shape() != b.value.shape(),
            _ => true,
        })
    }

    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>]) {
        for u in updates {
            let mut mean =
                std::mem::replace(self.get_mut(u.mean), Tensor::zeros(Default::default()));
            let var = self.get_mut(u.var);
            update_running(&mut mean, var, &u.stats, u.momentum);
            *self.get_mut(u.mean) = mean;
        }
    }
}

/// A pending running-statistics update produced by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<T>,
    pub momentum: T,
}

/// One gradient tensor per [`ParamStore`] entry, shape-matched.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore<T = f32> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        GradStore {
            grads: store
                .entries
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(T::zero());
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        self.grads[id.0].add_assign(g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn cast<U: Scalar>(&self) -> GradStore<U> {
        GradStore {
            grads: self.grads.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn counts_split_trainable_and_buffers() {
        let mut s = ParamStore::<f32>::new();
        s.add_trainable("w", Tensor::zeros(Shape::new(4, 3, 1, 1)));
        s.add_buffer("rm", Tensor::zeros(Shape::vector(4)));
        assert_eq!((s.trainable_count(), s.buffer_count()), (12, 4));
        let g = GradStore::zeros_like(&s);
        for id in s.ids() {
            assert_eq!(g.get(id).shape(), s.get(id).shape());
        }
    }

    #[test]
    fn assign_reports_first_mismatch() {
        let mut a = ParamStore::<f32>::new();
        a.add_trainable("x", Tensor::zeros(Shape::vector(2)));
        a.add_trainable("y", Tensor::zeros(Shape::vector(3)));
        let mut b = ParamStore::<f32>::new();
        b.add_trainable("x", Tensor::zeros(Shape::vector(2)));
        b.add_trainable("y", Tensor::zeros(Shape::vector(4)));
        match a.assign_from(&b) {
            Err(Error::TensorMismatch {
                index, expected, ..
            }) => {
                assert_eq!(index, 1);
                assert!(expected.starts_with('y'));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add_trainable("w", Tensor::zeros(Shape::scalar()));
        s.add_trainable("w", Tensor::zeros(Shape::scalar()));
    }
}
