use std::path::PathBuf;

use thiserror::Error;

/// Which hop of a two-hop chain failed to resolve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hop {
    First,
    Second,
}

impl std::fmt::Display for Hop {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Hop::First => f.write_str("hop 1"),
            Hop::Second => f.write_str("hop 2"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("sizing error: requested {requested} but only {available} available ({what})")]
    Sizing {
        what: String,
        requested: usize,
        available: usize,
    },

    #[error("no path at {hop}: ({entity}, r{relation}) has no fact")]
    NoPath {
        hop: Hop,
        entity: u32,
        relation: u32,
    },

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {index} out of range for size {size}")]
    Index { index: usize, size: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite value at step {step} in {name}")]
    NonFinite { step: u64, name: String },

    #[error("parse error in {file} at line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("corrupt artifact {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(file: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            msg: msg.into(),
        }
    }
}
