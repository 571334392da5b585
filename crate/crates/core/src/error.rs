use thiserror::Error;

use crate::data::Role;

pub type Result<T, E = GrfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GrfError {
    #[error("column `{0}` not found in input header")]
    MissingColumn(String),

    #[error("non-numeric cell at row {row}, column `{column}`: {value:?}")]
    NonNumericCell {
        /// 1-based data row (header excluded).
        row: usize,
        column: String,
        value: String,
    },

    #[error("input file is empty")]
    EmptyFile,

    #[error("dataset has no {0} column")]
    MissingRole(Role),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("identifying moment is degenerate (|{moment}| = {value:e})")]
    DegenerateIdentification { moment: &'static str, value: f64 },

    #[error("weight vector has no positive entries")]
    EmptySupport,

    #[error("operation `{operation}` is not supported for the {model} model")]
    UnsupportedForModel {
        operation: &'static str,
        model: &'static str,
    },

    #[error("curvature matrix is singular (|det| = {0:e})")]
    SingularCurvature(f64),

    #[error("invalid options: {0}")]
    InvalidOptions(String),

    #[error("no tree contributes a non-empty leaf{}", .sample.map(|i| format!(" for training sample {i}")).unwrap_or_default())]
    NoContributingTrees { sample: Option<usize> },

    #[error("forest was trained without little-bag grouping")]
    GroupsUnavailable,

    #[error("need at least 2 complete little bags, found {0}")]
    TooFewGroups(usize),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("feature mismatch: {0}")]
    FeatureMismatch(String),

    #[error("unknown simulation design `{0}`")]
    UnknownDesign(String),

    #[error("unsupported forest file format version {0}")]
    UnsupportedVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GrfError {
    /// Stable, machine-parsable name of the error variant.
    pub fn tag(&self) -> &'static str {
        match self {
            GrfError::MissingColumn(_) => "MissingColumn",
            GrfError::NonNumericCell { .. } => "NonNumericCell",
            GrfError::EmptyFile => "EmptyFile",
            GrfError::MissingRole(_) => "MissingRole",
            GrfError::InvalidData(_) => "InvalidData",
            GrfError::DegenerateIdentification { .. } => "DegenerateIdentification",
            GrfError::EmptySupport => "EmptySupport",
            GrfError::UnsupportedForModel { .. } => "UnsupportedForModel",
            GrfError::SingularCurvature(_) => "SingularCurvature",
            GrfError::InvalidOptions(_) => "InvalidOptions",
            GrfError::NoContributingTrees { .. } => "NoContributingTrees",
            GrfError::GroupsUnavailable => "GroupsUnavailable",
            GrfError::TooFewGroups(_) => "TooFewGroups",
            GrfError::LengthMismatch { .. } => "LengthMismatch",
            GrfError::FeatureMismatch(_) => "FeatureMismatch",
            GrfError::UnknownDesign(_) => "UnknownDesign",
            GrfError::UnsupportedVersion(_) => "UnsupportedVersion",
            GrfError::Io(_) => "Io",
            GrfError::Csv(_) => "Csv",
            GrfError::Json(_) => "Serialization",
        }
    }
}
