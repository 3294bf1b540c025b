use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] metaseg_autodiff::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("task error: {0}")]
    Task(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("migration error: found version {found}, expected {expected}")]
    Migration { found: u32, expected: u32 },
    #[error("format error in {file} at byte {offset}: {reason}")]
    Format { file: String, offset: u64, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image encoding error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(file: impl Into<String>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            offset,
            reason: reason.into(),
        }
    }
}
