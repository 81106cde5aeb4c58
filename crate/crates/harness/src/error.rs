use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("model/file error: {0}")]
    File(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Self::Config(_) => 2,
            Self::File(_) => 3,
            Self::Invariant(_) => 4,
        })
    }

    pub(crate) fn config(e: impl std::fmt::Display) -> Self {
        Self::Config(e.to_string())
    }

    pub(crate) fn file(e: impl std::fmt::Display) -> Self {
        Self::File(e.to_string())
    }

    /// Core errors raised while a run is in progress.
    pub(crate) fn run(e: bfm_core::Error) -> Self {
        match e {
            bfm_core::Error::Io(_) => Self::File(e.to_string()),
            _ => Self::Invariant(e.to_string()),
        }
    }

    /// Core errors raised while building the environment, features or tasks.
    pub(crate) fn setup(e: bfm_core::Error) -> Self {
        match e {
            bfm_core::Error::Consistency(_) => Self::Invariant(e.to_string()),
            bfm_core::Error::Io(_) => Self::File(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
