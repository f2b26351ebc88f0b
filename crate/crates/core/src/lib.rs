//! Probabilistic multi-horizon forecasting with infinite mixture models.
//!
//! A stochastic encoder–decoder attention network is run repeatedly with
//! fresh dropout masks; each pass yields per-horizon sufficient statistics and
//! the passes together form an equal-weight mixture predictive distribution.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod dist;
pub mod eval;
pub mod model;
mod error;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
