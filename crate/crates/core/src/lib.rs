//! Cross-fitted, doubly robust estimation of average partial effects.
//!
//! The estimator combines a resmoothed (Gaussian-convolved) plug-in
//! regression with a location-scale conditional score model. Comparator
//! estimators, a simulation harness and numerical checks live alongside.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod estimator;
pub mod numeric;
pub mod regression;
pub mod resmooth;
pub mod score;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};
