//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod fd;
mod graph;
mod params;
mod tensor;

pub use fd::{fd_check, fd_check_params, rel_error, FdReport, MAGNITUDE_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamSet, Parameter};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
