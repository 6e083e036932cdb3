//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on an append-only [`Graph`]. Gradients can be
//! evaluated numerically ([`Graph::gradient`]) or recorded as further graph
//! operations ([`Graph::gradient_graph`]), which allows differentiating
//! through gradient steps.

mod backward;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{Graph, Var};
pub use kernels::OpKind;
pub use tensor::Tensor;
