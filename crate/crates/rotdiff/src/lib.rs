//! Files, training driver and command line for `rotdiff-core`.
//!
//! Datasets are directories of PGM images with a text manifest, checkpoints
//! and reports are plain text, and every subcommand of the `rotdiff` binary
//! is available as a library call.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pgm;
pub mod report;
pub mod sweep;
pub mod training;

pub use error::{CliError, CliResult};
