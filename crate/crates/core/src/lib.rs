//! Multi-fidelity estimation of the expected information gain (EIG) of
//! experimental designs with approximate control variates (ACV).
//!
//! The pipeline is: draw a pilot sample to estimate the covariance of the
//! utility models ([`design::run_pilot`]), pick a sample allocation and
//! inner-loop sizes under a budget ([`design::optimize_allocation`],
//! [`design::optimize_inner_sizes`]), then evaluate the estimator over a grid
//! of designs with common random numbers ([`sweep::run_sweep`]).

pub mod acv;
pub mod config;
pub mod design;
pub mod error;
pub mod models;
pub mod pipeline;
pub mod prob;
pub mod stats;
pub mod sweep;
pub mod utility;

pub use error::{Error, Result};

/// A point in the design space.
pub type Design = Vec<f64>;
