//! Dense `f64` tensors with tape-based reverse-mode differentiation and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{AttnLayout, Gradients, Graph, Var};
pub use params::{uniform_init, Bound, ParamId, ParamStore};
pub use tensor::Tensor;
