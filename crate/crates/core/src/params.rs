use std::sync::Arc;

use indexmap::IndexMap;

use crate::tensor::Tensor;

/// Named model parameters in a fixed insertion order. The position of a
/// parameter in that order is its slot, which is how tapes and the
/// optimizer refer to it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Arc<Tensor>>,
}

impl ParamStore {
    /// Inserts (or replaces) a parameter and returns its slot.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.insert_full(name.into(), Arc::new(value)).0
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|t| &**t)
    }

    pub fn get_slot(&self, slot: usize) -> Option<&Tensor> {
        self.params.get_index(slot).map(|(_, t)| &**t)
    }

    pub fn name(&self, slot: usize) -> Option<&str> {
        self.params.get_index(slot).map(|(n, _)| n.as_str())
    }

    /// Shared handle for recording on a tape without copying.
    pub fn shared(&self, slot: usize) -> Arc<Tensor> {
        Arc::clone(&self.params[slot])
    }

    /// Mutable access; copies the tensor if a tape still holds it.
    pub fn slot_mut(&mut self, slot: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.params[slot])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), &**t))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }
}
