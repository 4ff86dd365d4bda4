//! Dense `f64` tensors, a define-by-run tape, and optimizers.

mod check;
mod graph;
mod optim;
mod params;
mod tensor;

pub use check::{grad_check, grad_check_params};
pub use graph::{softmax_row, Gradients, Graph, Var};
pub use optim::{OptimizerKind, OptimizerState};
pub use params::{Binding, ParamId, ParamStore};
pub use tensor::Tensor;
