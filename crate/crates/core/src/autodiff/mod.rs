//! Minimal reverse-mode automatic differentiation over 4-D tensors.
//!
//! Graphs are recorded dynamically. Gradients are produced as graph nodes, so
//! `grad(.., create_graph = true)` yields gradients that can be differentiated
//! again; the critic's gradient penalty depends on this.

mod graph;
pub mod kernels;
pub mod ops;
mod tensor;

pub use graph::{grad, grad_enabled, no_grad, Var};
pub use kernels::ConvGeom;
pub use tensor::{numel, Real, Tensor};
