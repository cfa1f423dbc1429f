use critembed::embedding::EmbeddingError;
use critembed::landscape::LandscapeError;
use critembed::network::NetworkError;
use critembed::numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, unreadable files or schema violations.
    #[error("{0}")]
    Usage(String),
    /// A check ran and failed; the report has already been written.
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Numerics(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::Network(inner) => inner.into(),
            EmbeddingError::Infeasible { .. }
            | EmbeddingError::NotAffine { .. }
            | EmbeddingError::Numerics(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<LandscapeError> for CliError {
    fn from(e: LandscapeError) -> Self {
        match e {
            LandscapeError::Network(inner) => inner.into(),
            LandscapeError::Embedding(inner) => inner.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}
