//! Minimal define-by-run reverse-mode differentiation over dense arrays.
//!
//! A [`Graph`] records every primitive as it is applied (the forward pass is
//! the graph construction itself). [`Graph::backward`] then walks the nodes in
//! reverse creation order and accumulates gradients into every leaf that was
//! created with `requires_grad`.
//!
//! Feature maps use NHWC layout throughout; convolution kernels are stored as
//! `[kh, kw, c_in, c_out]`.

mod error;
mod gradcheck;
mod graph;
mod tensor;

pub use error::AutodiffError;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
