//! Structured Walsh-Hadamard variational inference for Bayesian neural
//! networks and random-feature Gaussian process approximations.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bnn;
pub mod error;
pub mod flows;
pub mod gp_rff;
pub mod params;
pub mod transform;
pub mod whvi;

pub use error::{Error, Result};
