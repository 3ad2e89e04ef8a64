//! Config-driven runs of the curved-flat toolkit: configuration, verification stages,
//! reports and file output.

pub mod commands;
pub mod config;
pub mod output;
pub mod report;
pub mod suite;

pub use commands::{exit_code, resolve_out_dir, run, CliError, Command};
pub use config::{ConfigError, RunConfig};
pub use report::{Check, RunReport};
