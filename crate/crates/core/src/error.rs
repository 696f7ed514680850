use std::path::PathBuf;

/// Errors surfaced by every module of the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("coordinate {coord:?} out of bounds for resolution {resolution}")]
    Bounds { coord: [i64; 3], resolution: u32 },
    #[error("duplicate voxel at {0:?}")]
    Duplicate([u16; 3]),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("optimization diverged: {0}")]
    Divergence(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("image error on {}: {message}", path.display())]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Contract(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
