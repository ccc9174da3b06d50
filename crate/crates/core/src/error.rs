//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while validating data, sampling, or reading and writing files.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("subject {id}: {message}")]
    InvalidSubject { id: String, message: String },
    #[error("subject {id}: no feasible (h, v) pair inside the censoring intervals")]
    InfeasibleIntervals { id: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate truncation: interval ({lo}, {hi}] has mass below 1e-300 under N({mean}, {var})")]
    DegenerateTruncation { mean: f64, var: f64, lo: f64, hi: f64 },
    #[error("non-finite integrand value {value} at node {node}")]
    NonFiniteIntegrand { node: f64, value: f64 },
    #[error("insufficient distinct values: {found} (need at least 2 with positive spread)")]
    InsufficientDistinctValues { found: usize },
    #[error("empty urn for subject index {subject}: every weight is zero")]
    EmptyUrn { subject: usize },
    #[error("empty truncation interval ({lo}, {hi}] for subject index {subject}")]
    EmptyInterval { subject: usize, lo: f64, hi: f64 },
    #[error("posterior precision is singular in block `{block}`")]
    RankDeficient { block: String },
    #[error("support violation for subject index {subject}: {message}")]
    SupportViolation { subject: usize, message: String },
    #[error("iteration {iteration}, subject {subject}: {source}")]
    Sampler {
        iteration: usize,
        subject: String,
        #[source]
        source: Box<Error>,
    },
    #[error("insufficient draws: requested {requested}, available {available}")]
    InsufficientDraws { requested: usize, available: usize },
    #[error("no retained draws in fit result")]
    NoDraws,
    #[error("unsupported fit-file schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("malformed fit file: {0}")]
    MalformedFit(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("{path}: row {row}: {message}")]
    Parse { path: PathBuf, row: u64, message: String },
    #[error("{path}: {source}")]
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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
