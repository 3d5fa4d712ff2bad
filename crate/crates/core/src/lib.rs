//! Time-changed Markov processes driven by degenerate diffusion coefficients:
//! base path sampling, the inverse-clock construction, forward-equation
//! diagnostics and a scenario harness.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coefficients;
pub mod error;
pub mod generators;
pub mod harness;
pub mod fokkerplanck;
pub mod io;
mod parallel;
pub mod paths;
pub mod rng;
pub mod stats;
pub mod timechange;

pub use error::{Error, Result};
