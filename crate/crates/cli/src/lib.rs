//! Library surface of the workbench CLI: experiment configuration, artifact
//! layout, and the subcommand implementations. The `fia` binary is a thin
//! argument-parsing wrapper over these.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod plot;
pub mod pngio;
