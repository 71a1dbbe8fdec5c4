//! Partitioning message passing (PMP) for fraud detection on multi-relation
//! graphs: a GNN layer that routes each neighbor's message through a
//! fraud, benign or unlabeled transform chosen by its training label.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod bench;
pub mod cli;
pub mod error;
pub mod graph;
pub mod layer;
pub mod metrics;
pub mod model;
pub mod ndiff;
pub mod training;

pub use error::{Error, ErrorKind, Result};
