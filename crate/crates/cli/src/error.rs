use std::fmt::Display;
use std::process::ExitCode;

use thiserror::Error;

/// Command failure, tagged with the process exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or arguments.
    #[error("{0}")]
    Config(String),
    /// Inputs are present but unusable, or yield too little to work with.
    #[error("{0}")]
    Data(String),
    /// The particle filter lost every hypothesis.
    #[error("{0}")]
    Diverged(String),
    /// Writing outputs failed.
    #[error("{0}")]
    Output(String),
}

impl CliError {
    pub fn config(e: impl Display) -> Self {
        Self::Config(e.to_string())
    }

    pub fn data(e: impl Display) -> Self {
        Self::Data(e.to_string())
    }

    pub fn output(e: impl Display) -> Self {
        Self::Output(e.to_string())
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Self::Output(_) => 1,
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Diverged(_) => 4,
        })
    }
}
