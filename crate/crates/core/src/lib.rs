//! Variational Bayesian flow networks for graph generation.
//!
//! Beliefs over a graph signal are Gaussians with a structured (sparse,
//! Laplacian-derived) precision. Every Bayesian update is a symmetric
//! positive definite solve `P θ = h`, which couples node and edge variables
//! inside a single fusion step.
//!
//! Module map:
//!
//! * [`graph`]: graph samples, masks, class-to-continuous coding, dataset IO.
//! * [`structure`]: dependency graphs, weighted Laplacians, precision operators.
//! * [`solver`]: conjugate gradient, dense Cholesky, colored Gaussian noise.
//! * [`flow`]: accuracy schedules, flow-state sampling, natural-parameter fusion.
//! * [`decode`]: truncated-Gaussian class probabilities and the structured KL.
//! * [`predictor`]: the small differentiable denoiser, its loss and optimizer.
//! * [`pipeline`]: training and sampling loops, synthetic trees, V.U.N. metrics.
//! * [`config`]: flat `key = value` run configuration.
//! * [`verify`]: oracle-backed property suites shared by the CLI and tests.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod decode;
pub mod error;
pub mod flow;
pub mod graph;
pub mod par;
pub mod pipeline;
pub mod predictor;
pub mod solver;
pub mod structure;
pub mod verify;

pub use error::{Error, Result};
