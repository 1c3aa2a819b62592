use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("claim `{claim_id}` has no factuality label")]
    MissingLabel { claim_id: String },

    #[error("score {score} for claim `{claim_id}` is outside [0, 1]")]
    ScoreOutOfRange { claim_id: String, score: f64 },

    #[error("calibration requires at least one candidate threshold")]
    EmptyCalibration,

    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),

    #[error("requested calibration size {requested} exceeds corpus size {available}")]
    SplitSize { requested: usize, available: usize },

    #[error("invalid entailment triple ({entailment}, {neutral}, {contradiction})")]
    InvalidTriple {
        entailment: f64,
        neutral: f64,
        contradiction: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("template placeholder `{{{0}}}` was not supplied")]
    UnresolvedPlaceholder(String),

    #[error("scorer mismatch: calibration scored by `{calibration}`, test by `{test}`")]
    ScorerMismatch { calibration: String, test: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("{0} is undefined for this input")]
    Undefined(&'static str),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
