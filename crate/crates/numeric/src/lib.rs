//! Minimal dense-tensor library with reverse-mode automatic differentiation,
//! the layer set used by the zipflab agent (convolution, affine, LSTM cell,
//! softmax family, norms and dot products) and an RMSProp optimizer.
//!
//! The design is a flat tape: a [`graph::Graph`] records one forward pass
//! over parameters borrowed from a [`params::ParamSet`], `backward` fills
//! gradients in reverse topological order, and the caller drains parameter
//! gradients back into the set. Training runs in f32; gradient-check tests
//! instantiate the same code in f64.

pub mod check;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod lstm;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;

pub use error::NumericError;
pub use graph::{Graph, NodeId};
pub use lstm::lstm_step;
pub use optim::RmsProp;
pub use params::{ParamId, ParamSet};
pub use real::{r, Real};
pub use tensor::Tensor;
