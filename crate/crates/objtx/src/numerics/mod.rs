//! Dense-tensor numerics: scalar abstraction, tensors, pure kernels,
//! reverse-mode autodiff, Adam, LR schedule, and finite-difference checks.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod registry;
pub mod scalar;
pub mod schedule;
pub mod tensor;

pub use adam::AdamState;
pub use graph::{Graph, NodeId};
pub use registry::{ParamId, ParamRegistry};
pub use scalar::Scalar;
pub use tensor::Tensor;
