//! Differentiable tensor operations, losses, the AdamW optimizer and a
//! finite-difference gradient checker.

mod conv;
mod gradcheck;
mod graph;
mod optim;
mod real;
mod tensor;

pub use conv::ConvGeom;
pub use gradcheck::{
    analytic_grads, compare_with_finite_differences, grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR,
};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, AdamWConfig, OptimState};
pub use real::Real;
pub use tensor::Tensor;
