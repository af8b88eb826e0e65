//! Command-line pipeline around `prunetrack-core`: sparsity training, budget
//! planning, surgery, fine-tuning, evaluation and budget sweeps.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod report;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 2.
    #[error("configuration error: {0}")]
    Config(String),
    /// Anything that fails while running; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub(crate) fn in_budget(self, budget: f64) -> CliError {
        match self {
            CliError::Config(m) => CliError::Config(format!("budget {budget}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("budget {budget}: {m}")),
        }
    }
}

pub use commands::{run, Cli};
