//! Library side of the `gnpolicy` command: configuration, execution, CSV
//! output and the validation suites.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod run;
pub mod validate;

pub use error::CliError;
