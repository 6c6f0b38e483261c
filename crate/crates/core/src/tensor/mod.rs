//! Dense tensors, a reverse-mode tape, and finite-difference gradient checks.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod scalar;
#[allow(clippy::module_inception)]
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Activation, Graph, Var};
pub use params::{param_group, ParamStore};
pub use scalar::Real;
pub use tensor::Tensor;
