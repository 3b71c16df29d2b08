//! Command-line surface and HTTP service for conditioned portrait models.

pub mod commands;
pub mod service;

pub use commands::{run, CliError};
