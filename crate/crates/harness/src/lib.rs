//! Batch experiment harness for grounding-aware decoding: scenario corpus
//! generation, policy sweeps with shortcut metrics, stability sweeps, and
//! trajectory export. The `visage` binary is a thin CLI over this library.

pub mod experiment;
pub mod scenario_gen;
pub mod trajectory;

use thiserror::Error;

/// Harness-level failures, each mapped to a process exit category:
/// 2 config, 3 io, 4 scenario, 5 internal.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Io(_) => 3,
            HarnessError::Scenario(_) => 4,
            HarnessError::Internal(_) => 5,
        }
    }
}

pub(crate) fn io_err(context: &str, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{context}: {e}"))
}
