//! CLI error taxonomy mapped onto the exit-code contract: 2 for anything
//! the user can fix in a config or flag, 3 for a run that diverged.

use std::fmt;

use bdlab_core::{DataError, EvalError, ModelError, ProfileError, TrainError};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Diverged(msg) => write!(f, "{msg}"),
        }
    }
}

pub fn config_err<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Config(msg.into()))
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match &e {
            TrainError::Diverged { .. } | TrainError::NonFiniteLoss { .. } => {
                CliError::Diverged(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> CliError {
        CliError::Config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> CliError {
        CliError::Config(e.to_string())
    }
}

impl From<ProfileError> for CliError {
    fn from(e: ProfileError) -> CliError {
        CliError::Config(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> CliError {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Config(format!("io error: {e}"))
    }
}
