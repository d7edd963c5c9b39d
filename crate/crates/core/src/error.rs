use std::io;

use crate::numerics::NumericsError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("empty sequence")]
    EmptySequence,
    #[error("sequence of length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("data error: {0}")]
    Data(String),
    #[error("{malformed} of {total} lines malformed, e.g. {samples:?}")]
    Parse {
        malformed: usize,
        total: usize,
        samples: Vec<String>,
    },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    /// Process exit code for command-line front ends.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerics(NumericsError::NonFinite { .. }) => 4,
            Error::Numerics(NumericsError::Checkpoint(_)) => 3,
            Error::Data(_) | Error::Parse { .. } | Error::Io(_) | Error::EmptySequence => 3,
            Error::SequenceTooLong { .. } | Error::UndefinedMetric(_) => 3,
            Error::Numerics(_) => 4,
        }
    }
}
