//! Locally differentially private pairwise statistics.
//!
//! Quadratic forms `hᵀWh` and linear queries `Wh` over the normalized
//! histogram `h` of user inputs, estimated under ε-local differential
//! privacy with factorization (matrix) mechanisms, plus a Monte-Carlo
//! harness that measures mean squared error.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN.

pub mod error;
pub mod harness;
pub mod kernels;
pub mod matrix;
pub mod protocols;
pub mod randomizers;
pub mod rng;
pub mod statistics;
pub mod workload;

pub use error::{Error, Result};
