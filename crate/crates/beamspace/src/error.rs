use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Wav { path: PathBuf, source: hound::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] beamspace_core::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Gate(String),
}

/// Attaches a path to the error types that do not carry one.
pub(crate) trait WithPath<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

macro_rules! with_path {
    ($src:ty, $variant:ident) => {
        impl<T> WithPath<T> for std::result::Result<T, $src> {
            fn at(self, path: &std::path::Path) -> Result<T> {
                self.map_err(|source| Error::$variant { path: path.to_path_buf(), source })
            }
        }
    };
}

with_path!(std::io::Error, Io);
with_path!(hound::Error, Wav);
with_path!(serde_json::Error, Json);
with_path!(csv::Error, Csv);

pub(crate) fn format_error(path: &std::path::Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}
