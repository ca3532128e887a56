//! Library side of the `selbounds` command-line tool.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod simulate;

pub use error::CliError;
