use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range [0, {bound}) at position {position}")]
    IndexOutOfRange {
        position: usize,
        index: usize,
        bound: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("weight file error: {0}")]
    Weights(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn parse(source_name: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }

    /// Prefixes the message with a pipeline stage, keeping the error kind.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            Error::Shape(m) => Error::Shape(format!("{stage}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("{stage}: {m}")),
            Error::Config(m) => Error::Config(format!("{stage}: {m}")),
            Error::Data(m) => Error::Data(format!("{stage}: {m}")),
            Error::Model(m) => Error::Model(format!("{stage}: {m}")),
            Error::Weights(m) => Error::Weights(format!("{stage}: {m}")),
            Error::Parse {
                source_name,
                line,
                message,
            } => Error::Parse {
                source_name: format!("{stage}: {source_name}"),
                line,
                message,
            },
            e @ Error::IndexOutOfRange { .. } => Error::Data(format!("{stage}: {e}")),
            Error::Io(e) => Error::Io(io::Error::new(e.kind(), format!("{stage}: {e}"))),
        }
    }

    /// Process exit status: 2 for configuration problems (including model
    /// shapes the configuration cannot satisfy), 3 for data and file
    /// problems, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Model(_) => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Weights(_) | Error::IndexOutOfRange { .. } | Error::Io(_) => {
                3
            }
            Error::Numerical(_) => 4,
        }
    }
}
