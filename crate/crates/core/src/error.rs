use thiserror::Error;

/// Every failure the inference engine can report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RvbError {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("triangular factor is singular")]
    Singular,

    #[error("linear predictor {eta} exceeds the overflow guard")]
    OverflowGuard { eta: f64 },

    #[error("argument {x} outside the domain of {function}")]
    Domain { function: &'static str, x: f64 },

    #[error("pooled GLM fit did not converge within {iterations} IRLS iterations")]
    IrlsDiverged { iterations: usize },

    #[error("fixed-effect design is rank deficient")]
    RankDeficient,

    #[error("conditional mode search failed for subject {subject}")]
    ModeSearchFailed { subject: usize },

    #[error("optimization diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error("invalid shard count {v} for {n} subjects")]
    InvalidV { v: usize, n: usize },

    #[error("shard {index} failed: {source}")]
    Shard { index: usize, source: Box<RvbError> },

    #[error("standard deviation of the variational marginal is zero at index {index}")]
    ZeroSd { index: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("invalid {family} response at line {line}")]
    InvalidResponse { family: &'static str, line: usize },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl RvbError {
    /// Errors caused by an unlucky or extreme parameter value rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            RvbError::OverflowGuard { .. }
                | RvbError::NotPositiveDefinite { .. }
                | RvbError::Singular
                | RvbError::ModeSearchFailed { .. }
        )
    }
}

impl From<std::io::Error> for RvbError {
    fn from(e: std::io::Error) -> Self {
        RvbError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, RvbError>;
