use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid logits: {0}")]
    InvalidLogits(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("enumeration too large: {count} trajectories exceeds cap {cap}")]
    EnumerationTooLarge { count: u128, cap: u64 },
    #[error("gradient blowup: {0}")]
    GradientBlowup(String),
    #[error("group advantages need at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("missing field `{field}` required by mask rule {rule}")]
    MissingField { field: &'static str, rule: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("bound violation: {0}")]
    BoundViolation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
