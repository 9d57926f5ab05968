//! Periodic alternatives to softmax for attention.
//!
//! - [`scorefn`]: the eleven score-function kernels with analytic Jacobians.
//! - [`analysis`]: closed-form stability results, saturation measurement,
//!   row pre-normalization and curve emission.
//! - [`tinynn`]: a tape-based reverse-mode engine and a small attention demo
//!   with a pluggable score function and gradient taps.
//! - [`harness`]: datasets, the training loop with breakdown detection, and
//!   tap aggregation.

pub mod analysis;
pub mod harness;
pub mod rng;
pub mod scorefn;
pub mod tinynn;

pub use scorefn::{JacobianMatrix, ScoreError, ScoreEval, ScoreFunctionKind};
