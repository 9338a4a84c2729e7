//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations in creation order. [`Graph::evaluate`] binds
//! named leaves from a [`Feed`] and computes every node; [`Graph::backprop`]
//! walks the same list backwards to produce gradients for trainable leaves.
//! Everything is `f64` and single-threaded; independent graphs can be
//! evaluated in parallel.

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, CheckReport, GroupCheck, REL_ERROR_FLOOR};
pub use graph::{column_moments, Evaluation, Feed, Gradients, Graph, NodeId};
pub use tensor::Tensor;
