use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("timestamp gap at {timestamp}: spacing {spacing_minutes} min, expected 10 min")]
    Gap {
        timestamp: String,
        spacing_minutes: i64,
    },

    #[error("timestamps not strictly increasing at {timestamp}")]
    NonMonotone { timestamp: String },

    #[error("invalid value at row {row}, channel {channel}: {message}")]
    InvalidValue {
        row: usize,
        channel: &'static str,
        message: String,
    },

    #[error("channel {0} is constant (range = 0)")]
    ConstantChannel(&'static str),

    #[error("series too short: need at least {required} rows, got {actual}")]
    TooShort { required: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("non-finite state in ensemble member {member}")]
    NonFiniteMember { member: usize },

    #[error("singular innovation covariance (M P M^T + R = {0})")]
    SingularInnovation(f64),

    #[error("filter step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate sample set: {0}")]
    Degenerate(String),

    #[error("sample size {0} outside the supported range 3..=5000")]
    SampleSize(usize),

    #[error("non-positive sigma: {0}")]
    NonPositiveSigma(f64),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::Gap { .. } => "gap",
            Error::NonMonotone { .. } => "non_monotone",
            Error::InvalidValue { .. } => "invalid_value",
            Error::ConstantChannel(_) => "constant_channel",
            Error::TooShort { .. } => "too_short",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Divergence { .. } => "divergence",
            Error::NonFiniteMember { .. } => "non_finite_member",
            Error::SingularInnovation(_) => "singular_innovation",
            Error::Step { .. } => "step",
            Error::Degenerate(_) => "degenerate",
            Error::SampleSize(_) => "sample_size",
            Error::NonPositiveSigma(_) => "non_positive_sigma",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::Empty(_) => "empty",
            Error::Scenario(_) => "scenario",
            Error::Json { .. } => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
