//! Configuration, data ingestion and subcommands behind the `xfmnet` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
