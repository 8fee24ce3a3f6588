use std::path::PathBuf;

use crate::trace::Phase;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model shape: {0}")]
    InvalidShape(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unreachable generator target: {0}")]
    UnreachableTarget(String),

    #[error("{0} phase has no tokens")]
    EmptyPhase(Phase),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("missing prediction for decode token {token}, layer {layer}")]
    MissingPrediction { token: usize, layer: usize },

    #[error("sequence too short: need at least {needed} decode tokens, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("expert slot budget {budget} cannot give every one of {layers} layers a slot")]
    BudgetTooSmall { budget: usize, layers: usize },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("plan does not match trace: {0}")]
    PlanMismatch(String),

    #[error("report mismatch: {0}")]
    ReportMismatch(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable identifier for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidShape(_) => "invalid_shape",
            Error::Parse { .. } => "parse",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::Normalization(_) => "normalization",
            Error::InvalidConfig(_) => "invalid_config",
            Error::UnreachableTarget(_) => "unreachable_target",
            Error::EmptyPhase(_) => "empty_phase",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::MissingPrediction { .. } => "missing_prediction",
            Error::TooShort { .. } => "too_short",
            Error::BudgetTooSmall { .. } => "budget_too_small",
            Error::IndexOutOfRange(_) => "index_out_of_range",
            Error::PlanMismatch(_) => "plan_mismatch",
            Error::ReportMismatch(_) => "report_mismatch",
            Error::Context { source, .. } => source.kind(),
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
