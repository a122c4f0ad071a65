//! Command-line driver: configuration, run directories, plotting and the
//! subcommands that tie the experiment pipeline together.

pub mod app;
pub mod config;
pub mod plot;
pub mod run;
