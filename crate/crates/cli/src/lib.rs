//! Command-line front end and HTTP service for the `iospe` pipeline.

pub mod cli;
pub mod server;

pub use cli::{run, Cli};
