//! Library half of the `whvi` command-line tool: configuration, dataset
//! ingestion, checkpoints, the experiment runners and plot emission.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod plot;
pub mod run;
pub mod synth;

pub use error::{CliError, Result};
