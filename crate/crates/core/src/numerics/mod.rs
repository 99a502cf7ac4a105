//! Dense tensors, taped reverse-mode differentiation and SGD.

mod gradcheck;
mod graph;
pub mod kernels;
pub mod ops;
mod optim;
mod scalar;
mod tensor;

pub use gradcheck::{analytic_gradient, grad_check, max_relative_error, numerical_gradient};
pub use graph::{Gradients, Graph, Var};
pub use optim::{sgd_step, zero_grads, LearningRates, ParamGroup, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Guard for channel normalization of all-zero vectors.
pub const NORMALIZE_EPS: f64 = 1e-12;
