use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad flags or config.
    #[error("usage: {0}")]
    Usage(String),
    /// Dataset, scenario, recipe or trace problems.
    #[error("data: {0}")]
    Data(String),
    /// A check the harness itself guarantees did not hold.
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Core(#[from] htdc_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Core(htdc_core::Error::Config(_)) => 1,
            HarnessError::Invariant(_) => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub(crate) fn read_to_string(path: impl AsRef<std::path::Path>) -> Result<String> {
    std::fs::read_to_string(path.as_ref()).map_err(|e| HarnessError::io(path, e))
}

pub(crate) fn write(path: impl AsRef<std::path::Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path.as_ref(), contents).map_err(|e| HarnessError::io(path, e))
}
