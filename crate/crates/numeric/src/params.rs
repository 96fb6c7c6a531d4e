//! Named parameter registry shared by the graph, the optimizer and
//! checkpointing.

use crate::error::NumericError;
use crate::real::Real;
use crate::tensor::Tensor;

/// Stable handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Parameters are registered once, in a fixed order, so ids, optimizer
/// state and checkpoints all line up.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<R: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<R>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor.requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Add per-parameter gradient contributions (fan-out across graphs sums).
    pub fn accumulate_grads(&mut self, grads: Vec<(ParamId, Vec<R>)>) {
        for (id, g) in grads {
            self.tensors[id.0].accumulate_grad(&g);
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Value-exact equality, used by checkpoint round-trip tests.
    pub fn value_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape == b.shape && a.data == b.data)
    }

    pub fn check_finite(&self) -> Result<(), NumericError> {
        for (name, t) in self.iter() {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(NumericError::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }
}
