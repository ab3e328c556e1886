//! Command line, file formats and run directories for `diffcl-core`.
//!
//! Commands: `gen-data`, `train`, `eval`, `ablate`, `plot`. Exit codes are
//! 0 on success, 2 for configuration errors, 3 for IO and file-format
//! errors, 4 for numeric failures during training and 5 when there is no
//! data to work on.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod plot;
pub mod run;

pub use error::{CliError, Result};
