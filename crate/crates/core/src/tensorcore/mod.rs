//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order; [`Graph::backward`] replays the record in reverse and accumulates
//! gradients into the leaves created with [`Graph::param`].

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, Var};
pub use tensor::{Scalar, Tensor};
