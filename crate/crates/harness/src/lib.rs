//! Game orchestration, benchmarks and Monte Carlo runs on top of `jenga_core`.

pub mod bench;
pub mod config;
pub mod game;
pub mod montecarlo;
pub mod output;

pub use config::RunConfig;
pub use game::{run_game, GameLog};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("simulation error: {0}")]
    Sim(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl HarnessError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Sim(_) => 1,
            HarnessError::Io(_) => 2,
        }
    }
}

pub(crate) fn sim_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Sim(e.to_string())
}
