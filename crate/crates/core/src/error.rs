// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every stage of the probing pipeline.

use std::path::PathBuf;

/// Errors raised while loading data, training probes or running analyses.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("size mismatch in {path}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("non-finite activation at row {row}, column {column}")]
    NonFiniteValue { row: usize, column: usize },

    #[error("layer map does not partition [0, {num_neurons}): {detail}")]
    LayerMapGap { num_neurons: usize, detail: String },

    #[error("label column `{task}` has {found} rows, dataset has {expected}")]
    LabelAlignmentError {
        task: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid metadata: {0}")]
    InvalidMeta(String),

    #[error("invalid token table: {0}")]
    InvalidTokens(String),

    #[error("invalid labels for task `{task}`: {detail}")]
    InvalidLabels { task: String, detail: String },

    #[error("splits disagree: {0}")]
    SplitMismatch(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("vocabulary is empty")]
    EmptyVocabulary,

    #[error("tagset has {0} label(s); at least 2 are required")]
    DegenerateTagset(usize),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("feature subset is empty")]
    EmptySubset,

    #[error("neuron index {index} out of range for {num_neurons} neurons")]
    IndexOutOfRange { index: usize, num_neurons: usize },

    #[error("duplicate neuron index {0}")]
    DuplicateIndex(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged: non-finite parameters after step {step}")]
    Diverged { step: usize },

    #[error("label `{0}` has zero total weight mass")]
    ZeroMass(usize),

    #[error("requested {requested} neurons, model has {available}")]
    InvalidN { requested: usize, available: usize },

    #[error("every grid point failed")]
    NoViablePoint,

    #[error("ranking not found: {0}")]
    MissingRanking(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors that describe malformed input data rather than a
    /// failure while computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MissingFile(_)
                | Error::SizeMismatch { .. }
                | Error::NonFiniteValue { .. }
                | Error::LayerMapGap { .. }
                | Error::LabelAlignmentError { .. }
                | Error::InvalidMeta(_)
                | Error::InvalidTokens(_)
                | Error::InvalidLabels { .. }
                | Error::SplitMismatch(_)
                | Error::Json { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
