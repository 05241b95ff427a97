use condshape_models::ModelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Core(#[from] condshape_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Stable machine-readable category for the error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Missing(_) => "missing_input",
            CliError::Model(ModelError::Config(_)) => "config",
            CliError::Model(_) => "model",
            CliError::Core(condshape_core::Error::Format(_)) => "format",
            CliError::Core(_) => "domain",
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
