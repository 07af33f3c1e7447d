//! Command implementations behind the `mmrefine` binary.

// Validation is written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
mod error;
pub mod output;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use error::CliError;
