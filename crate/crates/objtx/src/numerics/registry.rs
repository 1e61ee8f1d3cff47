//! Named parameter storage shared by the graph, the optimizer, and
//! checkpoints.

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

/// Handle into a [`ParamRegistry`]. Ids are dense and stable for the
/// lifetime of the registry; registration order defines checkpoint order.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
    /// Whether weight decay applies. Biases, layer-norm scales/shifts, and
    /// embedding tables opt out.
    pub decay: bool,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry<S> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> ParamRegistry<S> {
    pub fn new() -> Self {
        ParamRegistry {
            entries: Vec::new(),
        }
    }

    /// Register a parameter under a unique name.
    pub fn register(&mut self, name: &str, value: Tensor<S>, decay: bool) -> Result<ParamId> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            decay,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<S> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<S>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}
