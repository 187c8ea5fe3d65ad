use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the dptails library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sample set is empty")]
    EmptySample,

    #[error("non-finite value {value} at position {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("level {0} is outside [0, 1]")]
    LevelOutOfRange(f64),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("unknown group `{0}`")]
    UnknownGroup(String),

    #[error("group `{group}` has {count} samples, at least {required} required")]
    TooFewSamples {
        group: String,
        count: usize,
        required: usize,
    },

    #[error("at least {required} groups required, got {count}")]
    TooFewGroups { count: usize, required: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("group proportions sum to {sum}, expected 1")]
    InvalidProportions { sum: f64 },

    #[error("column `{0}` not found in CSV header")]
    MissingColumn(String),

    #[error("row {row}: cannot parse `{value}` in column `{column}` as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("CSV file {0} contains no data rows")]
    EmptyFile(PathBuf),

    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("group `{group}` is missing from the {part} part of the split; try another seed")]
    SplitMissingGroup { group: String, part: &'static str },

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("value grid has no feasible candidate on the {branch} branch at level {level}")]
    InfeasibleGrid { branch: &'static str, level: usize },

    #[error("oracle solution is not monotone for group {group} at level {level}")]
    NonMonotone { group: usize, level: usize },

    #[error("unsupported transform format version {found}, expected {expected}")]
    FormatVersion { found: u32, expected: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for errors caused by input data violating a contract (as opposed
    /// to I/O or configuration problems).
    pub fn is_data_contract(&self) -> bool {
        matches!(
            self,
            Error::EmptySample
                | Error::NonFinite { .. }
                | Error::UnknownGroup(_)
                | Error::TooFewSamples { .. }
                | Error::TooFewGroups { .. }
                | Error::LengthMismatch { .. }
                | Error::Parse { .. }
                | Error::EmptyFile(_)
                | Error::MalformedRow { .. }
                | Error::SplitMissingGroup { .. }
                | Error::RankDeficient
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
