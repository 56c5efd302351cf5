//! Command-line experiments on residual-network expansion: training, block
//! insertion with certification, alignment simulations, scaling recursions,
//! gradient-covariance diagnostics and seeded sweeps.
//!
//! The numerical work lives in `resexp_core`; this crate adds configuration
//! files, output formats, parallel runners and the `resexp` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod record;
pub mod runner;

pub use error::{exit, CliError, Result};
