//! Command-line driver for guided consistency distillation on the toy world.
//!
//! Every command resolves a [`config::RunConfig`], records the resolved TOML
//! next to its outputs and refuses checkpoints whose frozen components
//! (world, dataset, embedder) differ from the ones it was given.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use commands::{execute, run, Cli, Command, Common};
pub use error::{CliError, Result};
