//! Library side of the `acvnet` binary, so commands can be driven from tests.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{Precision, RunConfig};
pub use error::{CliError, Result};
