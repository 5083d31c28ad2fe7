use std::io;
use std::path::PathBuf;

/// Errors produced by the placement engine and the experiment harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("topology has no cache sites; the objective is undefined")]
    EmptyTopology,

    #[error("objective undefined on uncovered window: no sample point is covered by any cache")]
    UncoveredWindow,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: duplicate cache id {id}")]
    DuplicateId { line: usize, id: u32 },

    #[error("line {line}: cache {id} has non-positive radius {radius}")]
    NonPositiveRadius { line: usize, id: u32, radius: f64 },

    #[error("cache ids must be contiguous from 1; {missing} is missing")]
    NonContiguousIds { missing: u32 },

    #[error("unknown cache index {0}")]
    UnknownCache(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("infeasible placement at cache {cache}: {reason}")]
    InfeasiblePlacement { cache: usize, reason: String },

    #[error("popularity vector rejected: {0}")]
    InvalidPopularity(String),

    #[error("enumeration of {count} candidate sets exceeds the cap of {cap}")]
    EnumerationCap { count: u128, cap: u128 },

    #[error("three-level row pivot value {delta} lies outside [{tau}, 1 - {tau}]")]
    PivotOutOfBox { delta: f64, tau: f64 },

    #[error("rounded row for cache {cache} stores {stored} files instead of {capacity}; tau not small enough")]
    RoundingInfeasible {
        cache: usize,
        stored: usize,
        capacity: usize,
    },

    #[error("marginals sum to {sum}, expected {capacity}")]
    MarginalSum { sum: f64, capacity: usize },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("no result records to emit")]
    NoRecords,

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by a bad configuration or bad input file rather
    /// than by a failure while running.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::InvalidParameter { .. }
                | Error::Parse { .. }
                | Error::DuplicateId { .. }
                | Error::NonPositiveRadius { .. }
                | Error::NonContiguousIds { .. }
                | Error::InvalidPopularity(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
