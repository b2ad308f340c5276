//! Command-line driver for the scene positioning pipeline.

pub mod bundle;
pub mod commands;
pub mod error;

pub use bundle::{Bundle, Manifest, MANIFEST_VERSION};
pub use commands::{evaluate, run, Cli, Command, MetricsFile};
pub use error::{CliError, CliResult};
