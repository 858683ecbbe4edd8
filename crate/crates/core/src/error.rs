//! Crate-wide error type.

/// Errors produced by the library.
///
/// Variants follow the failure classes of the public operations: dimension
/// mismatches between distributions, domain violations on scalar parameters,
/// divergent series parameters, adversary budgets that erase the safety zone,
/// world-construction failures, and support violations in preference losses.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("invalid distribution: {0}")]
    InvalidDist(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("divergent parameter: {0}")]
    Divergence(String),

    #[error("budget error: {0}")]
    Budget(String),

    #[error("construction error: {0}")]
    Construction(String),

    #[error("mapping error: {0}")]
    Mapping(String),

    #[error("support violation: {0}")]
    Support(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("region error: {0}")]
    Region(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
