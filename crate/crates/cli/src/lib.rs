//! Library side of the `camelsplat` command-line tool: argument types,
//! subcommand implementations and report builders.

pub mod args;
pub mod commands;
pub mod report;

pub use args::*;
pub use commands::CliError;
