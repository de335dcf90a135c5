//! Experiment driver: configuration loading, run directories and the
//! subcommands behind the `querytune` binary.

pub mod commands;
pub mod config;
pub mod runs;
