//! Error-to-exit-code mapping.
//!
//! Exit codes: 0 success, 2 input problems, 3 key-binding refusals,
//! 4 container format errors, 1 anything else.

use diffguard_core::pipelines::PipelineError;
use thiserror::Error;

use crate::keyfile::KeyFileError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    KeyBinding(String),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::KeyBinding(_) => 3,
            CliError::Format(_) => 4,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<KeyFileError> for CliError {
    fn from(e: KeyFileError) -> Self {
        match e {
            KeyFileError::Io(io) => CliError::Input(io.to_string()),
            other => CliError::Format(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::FingerprintMismatch { .. }
            | PipelineError::KeyPairMismatch { .. }
            | PipelineError::BackendMismatch { .. } => CliError::KeyBinding(e.to_string()),
            PipelineError::BadTerminalStep { .. } => CliError::Format(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<diffguard_core::adapters::AdapterError> for CliError {
    fn from(e: diffguard_core::adapters::AdapterError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<diffguard_core::msi::MsiError> for CliError {
    fn from(e: diffguard_core::msi::MsiError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<diffguard_core::eval::EvalError> for CliError {
    fn from(e: diffguard_core::eval::EvalError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}
