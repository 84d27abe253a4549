use crate::data_io::DataError;
use crate::matcher::CheckpointError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("numerics: {0}")]
    Numerics(#[from] NumericsError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// Short stable label for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Data(_) => "data",
            Error::Numerics(_) => "numerics",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Invalid(_) => "invalid",
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
