use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// The configuration is unreadable, malformed or fails validation.
    #[error("invalid configuration: {0}")]
    Schema(String),
    /// A computation failed; partial outputs are kept.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io { .. } => 1,
        }
    }
}

impl From<relent_core::Error> for CliError {
    fn from(e: relent_core::Error) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<relent_core::evolve::EvolveFailure> for CliError {
    fn from(e: relent_core::evolve::EvolveFailure) -> Self {
        CliError::Numeric(e.error.to_string())
    }
}

impl From<relent_micro::MicroError> for CliError {
    fn from(e: relent_micro::MicroError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
