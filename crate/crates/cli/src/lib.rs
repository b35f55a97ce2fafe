//! Command-line plumbing for the selfmem workspace: run configuration,
//! on-disk formats (corpus, index, checkpoints, pools, selections, report
//! tables), and the eight subcommands. The algorithms live in
//! `selfmem-core`; everything here is IO and orchestration glue.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use config::{RetrievalParams, RunConfig};
pub use error::CliError;
