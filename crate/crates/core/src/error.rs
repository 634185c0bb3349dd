// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Shape(String),

    /// A cross-entropy mask selected no rows.
    #[error("no supervised positions")]
    NoSupervisedPositions,

    /// A variable handle does not belong to the live tape.
    #[error("variable {0} is not on this tape")]
    NotOnTape(usize),

    /// A gradient or value contained NaN or infinity.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// An index (token, emotion, speaker, position) is out of range.
    #[error("{what} {index} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    /// A configuration value violates its invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training regime and initial checkpoint do not fit together.
    #[error("regime error: {0}")]
    Regime(String),

    /// Malformed sequence layout.
    #[error("layout error: {0}")]
    Layout(String),

    /// Malformed checkpoint, corpus or report file.
    #[error("format error: {0}")]
    Format(String),

    /// A runtime invariant (freeze contract, determinism, oracle bound) failed.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
