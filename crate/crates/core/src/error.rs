use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("label {label} at row {row} is outside 0..{classes}")]
    LabelOutOfRange {
        row: usize,
        label: i64,
        classes: usize,
    },

    #[error("non-finite logit at row {row}, column {column}")]
    NonFiniteLogit { row: usize, column: usize },

    #[error("non-finite input value at position {position}")]
    NonFiniteInput { position: usize },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("degenerate split: {examples} examples with calibration fraction {fraction} leaves an empty side")]
    DegenerateSplit { examples: usize, fraction: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("rank {rank} out of range for {classes} labels")]
    RankOutOfRange { rank: usize, classes: usize },

    #[error("holdout set is empty")]
    EmptyHoldout,

    #[error("coverage Beta law is degenerate: floor((n+1)*delta) = 0 for n={n}, delta={delta}")]
    DegenerateBeta { n: usize, delta: f64 },

    #[error("every prediction set is empty")]
    AllSetsEmpty,

    #[error("every size bin is empty")]
    AllBinsEmpty,

    #[error("set size {size} is not covered by any bin")]
    UncoveredSize { size: usize },

    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("report encoding failed for {path}: {reason}")]
    Encoding { path: PathBuf, reason: String },

    #[error("{method} delta={delta} trial {trial}: {source}")]
    Trial {
        method: String,
        delta: f64,
        trial: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Stable machine-readable kind, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedFile { .. } => "MalformedFile",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::NonFiniteLogit { .. } => "NonFiniteLogit",
            Error::NonFiniteInput { .. } => "NonFiniteInput",
            Error::InvalidDataset(_) => "InvalidDataset",
            Error::DegenerateSplit { .. } => "DegenerateSplit",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::RankOutOfRange { .. } => "RankOutOfRange",
            Error::EmptyHoldout => "EmptyHoldout",
            Error::DegenerateBeta { .. } => "DegenerateBeta",
            Error::AllSetsEmpty => "AllSetsEmpty",
            Error::AllBinsEmpty => "AllBinsEmpty",
            Error::UncoveredSize { .. } => "UncoveredSize",
            Error::IoFailure { .. } => "IoFailure",
            Error::Encoding { .. } => "Encoding",
            Error::Trial { source, .. } => source.kind(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::MalformedFile {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
