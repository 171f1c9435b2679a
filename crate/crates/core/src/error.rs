use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes disagree; the message names the offending axis.
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller violated an operation contract (e.g. non-scalar backward root).
    #[error("contract error: {0}")]
    Contract(String),
    #[error("tape error: {0}")]
    Tape(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("load error: {0}")]
    Load(String),
    /// Training or evaluation hit a non-finite value or diverged.
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }
}
