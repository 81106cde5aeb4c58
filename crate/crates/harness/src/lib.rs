//! Experiment harness for latent-space adaptation of tabular BFMs: config
//! parsing, the `pretrain`/`infer`/`adapt`/`eval`/`ablate` subcommands, the
//! action-space Q-learning baseline and byte-stable metric files.

pub mod baseline;
pub mod config;
pub mod error;
pub mod format;
pub mod runner;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
