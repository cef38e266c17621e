use thiserror::Error;

use crate::domain::Violation;

/// Errors raised by the estimators, the synthetic oracle and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset has no rows")]
    EmptyDataset,

    #[error("treatment arm {arm} is empty")]
    EmptyArm { arm: usize },

    #[error("invalid dataset: {}", format_violations(.0))]
    InvalidDataset(Vec<Violation>),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("moment matrix M[Z,X|T={arm}] is singular (relative sigma_min {rel_sigma_min:.3e})")]
    SingularMomentMatrix { arm: usize, rel_sigma_min: f64 },

    #[error("moment matrix M[Z,X|T={arm}] is rank deficient (relative sigma_min {rel_sigma_min:.3e})")]
    RankDeficient { arm: usize, rel_sigma_min: f64 },

    #[error("moment sequence has length {found}, expected {expected}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("Hankel matrix is degenerate (sigma_min {sigma_min:.3e}); fewer than k distinguishable components")]
    DegenerateHankel { sigma_min: f64 },

    #[error("recovered atoms are complex (max |imag| {max_imag:.3e})")]
    ComplexAtoms { max_imag: f64 },

    #[error("parameter {name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("non-binary data in column {column} at row {row}")]
    NonBinaryData { column: String, row: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("csv error: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable name, used for in-band failure records.
    pub fn name(&self) -> &'static str {
        match self {
            Error::EmptyDataset => "EmptyDataset",
            Error::EmptyArm { .. } => "EmptyArm",
            Error::InvalidDataset(_) => "InvalidDataset",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::SingularMomentMatrix { .. } => "SingularMomentMatrix",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::DegenerateHankel { .. } => "DegenerateHankel",
            Error::ComplexAtoms { .. } => "ComplexAtoms",
            Error::OutOfRange { .. } => "OutOfRange",
            Error::InvalidModel(_) => "InvalidModel",
            Error::NonBinaryData { .. } => "NonBinaryData",
            Error::Config(_) => "ConfigError",
            Error::Csv(_) => "CsvError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Csv(format!("{other:?}")),
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
