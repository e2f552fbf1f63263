//! Dense arrays with reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`] handles; calling
//! [`Graph::backward`] on a scalar returns exact gradients for every
//! leaf created with [`Graph::param`]. [`Graph::stop_gradient`] copies a
//! value into a fresh non-differentiable leaf.

pub mod container;
mod elementwise;
pub mod gradcheck;
mod graph;
mod nn_ops;
mod shape_ops;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{DType, Real, Tensor};
