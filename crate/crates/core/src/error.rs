use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("session format error: {0}")]
    Format(String),

    #[error("frame {frame}: {message}")]
    Validation { frame: usize, message: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("no valid pixels to estimate a frame scale")]
    NoScale,

    #[error("no frame in block {block} produced a valid scale")]
    BlockScale { block: usize },

    #[error("invalid scale {0}")]
    InvalidScale(f64),

    #[error("alignment failed: {0}")]
    Alignment(String),

    #[error("no plane: {0}")]
    NoPlane(String),

    #[error("grid plane differs from the supplied plane; reprojection required")]
    ReprojectionRequired,

    #[error("start cell {0:?} is not free and cannot be snapped")]
    InvalidStart((usize, usize)),

    #[error("internal consistency: {0}")]
    Consistency(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("block {block}: {source}")]
    InBlock {
        block: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("service error: {0}")]
    Service(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_block(self, block: usize) -> Self {
        match self {
            e @ Error::InBlock { .. } => e,
            other => Error::InBlock {
                block,
                source: Box::new(other),
            },
        }
    }
}
