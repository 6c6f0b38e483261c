use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("alignment error: {what} ({left:?} vs {right:?})")]
    Alignment {
        what: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error(
        "resolution {resolution} is not divisible by stride {stride}; nearest valid resolutions are {below} and {above}"
    )]
    Divisibility {
        resolution: usize,
        stride: usize,
        below: usize,
        above: usize,
    },

    #[error("syntax error in {path} at line {line}, column {column}: {detail}")]
    Syntax {
        path: PathBuf,
        line: usize,
        column: usize,
        detail: String,
    },

    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error(
        "context overflow: sequence needs {needed} tokens but the decoder context holds {context}"
    )]
    ContextOverflow { needed: usize, context: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("manifest error at line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
