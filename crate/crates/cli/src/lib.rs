//! Command-line front end: configuration, run directories and the
//! `train`/`eval`/`probe`/`export-embeddings`/`import`/`synth` commands.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

pub use config::{load, Overrides, RunConfig};
pub use error::{CliError, CliResult, EXIT_NUMERIC, EXIT_USER};
