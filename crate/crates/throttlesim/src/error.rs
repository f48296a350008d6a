//! Error taxonomy shared by the library and the CLI.

use thiserror::Error;

/// Everything that can go wrong while configuring or running the simulator.
#[derive(Debug, Error)]
pub enum SimError {
    /// Configuration problems: unreadable file, syntax error, unknown key,
    /// or a value that fails validation.
    #[error("config error: {0}")]
    Config(String),

    /// Model calibration failed: non-monotone target table, a fitted
    /// parameter outside its physical range, or an unacceptable residual.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// An internal physical-model invariant was violated at runtime.
    #[error("model violation: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SimError {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Config(_) => 2,
            SimError::Calibration(_) => 3,
            SimError::Model(_) | SimError::Io(_) => 1,
        }
    }
}

pub type SimResult<T> = Result<T, SimError>;
