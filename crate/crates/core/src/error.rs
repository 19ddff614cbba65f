use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("truncated voxel buffer: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("wrong grid kind: {0}")]
    Kind(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("interpolation needs at least 2 slices, got {0}")]
    InsufficientSamples(usize),

    #[error("operator `{op}` needs at least 2 samples along the reduced axis, got {depth}")]
    InsufficientDepth { op: &'static str, depth: usize },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("mask selection is empty")]
    EmptyMask,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    Value(String),

    #[error("expected {expected} values, got {found}")]
    Arity { expected: usize, found: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("incomplete prediction table: {0}")]
    Completeness(String),

    #[error("distance undefined: {0}")]
    UndefinedDistance(&'static str),

    #[error("ROC-AUC undefined: need at least one positive and one negative")]
    UndefinedAuc,

    #[error("rating matrix rows must each sum to {expected}; row {row} sums to {found}")]
    InconsistentRows {
        row: usize,
        expected: u32,
        found: u32,
    },

    #[error("vertebra C{vertebra}: {reason}")]
    Extraction { vertebra: u8, reason: String },

    #[error("missing input: {0}")]
    Dependency(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }
}
