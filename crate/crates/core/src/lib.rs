//! Dense-sparse-dense (DSD) training engine.
//!
//! Trains fully connected classifiers in three phases: dense training,
//! magnitude pruning with masked retraining, then dense retraining from the
//! sparse solution with the pruned weights restarted at zero. Also provides
//! the equal-budget lowered-learning-rate control, multi-seed Welch t-tests,
//! and weight-distribution histograms for every phase boundary.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flow;
pub mod network;
pub mod optimizer;
pub mod pruning;
pub mod reporting;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
