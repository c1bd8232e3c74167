//! Command-line front end: simulation studies, CSV analyses and
//! adherence sensitivity sweeps.

pub mod cli;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;

pub use cli::Cli;
pub use commands::run;
pub use error::{CliError, CliResult};
