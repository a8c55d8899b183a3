//! Library side of the `ppl` command: dataset readers, the param archive
//! and the subcommand implementations.

pub mod archive;
pub mod commands;
pub mod config;
pub mod data;
