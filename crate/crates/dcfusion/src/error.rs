//! Error type shared by every module of the crate.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, FusionError>;

/// Every failure the library can surface.
///
/// Variants carry enough context to diagnose the failing module without a
/// backtrace; the CLI prints them verbatim.
#[derive(Debug, Error)]
pub enum FusionError {
    /// A matrix that must be positive (semi-)definite is not.
    #[error("matrix is not positive definite ({0})")]
    NotPsd(String),
    /// Two objects that must share a dimension do not.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    /// A computation produced NaN or an infinity.
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    /// A bound was requested on a region that is empty or unbounded.
    #[error("region is empty or unbounded")]
    UnboundedRegion,
    /// An alternating series did not resolve within the iteration cap.
    #[error("alternating series failed to resolve within {0} iterations")]
    SeriesNonConvergence(usize),
    /// A random-walk Metropolis chain essentially stopped moving.
    #[error("Metropolis chain diverged: acceptance rate {rate:.2e}")]
    ChainDiverged { rate: f64 },
    /// A tempering exponent outside (0, 1] or not the reciprocal of an integer.
    #[error("invalid tempering exponent {0}")]
    BadBeta(f64),
    /// An effective-sample-size floor outside (0, 1).
    #[error("invalid CESS threshold {0}; must lie in (0, 1)")]
    BadZeta(f64),
    /// An operation received no samples, factors or particles.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    /// Every particle carries zero weight.
    #[error("all particle weights are zero")]
    AllZeroWeights,
    /// Rejection sampler acceptance rate fell below the starvation floor.
    #[error("acceptance starvation: rate {rate:.2e} after {proposals} proposals")]
    AcceptanceStarvation { rate: f64, proposals: u64 },
    /// Sample sets that must have equal counts do not.
    #[error("sample count mismatch: {0} vs {1}")]
    CountMismatch(usize, usize),
    /// Too few effective samples for a density estimate.
    #[error("too few effective samples ({0:.1}) for a density estimate")]
    TooFewSamples(f64),
    /// A φ bound was violated inside its own layer (indicates a bug).
    #[error("phi bound violated: phi={phi} outside [{lower}, {upper}]")]
    BoundViolation { phi: f64, lower: f64, upper: f64 },
    /// A configuration field is missing or invalid.
    #[error("invalid configuration at `{path}`: {msg}")]
    ConfigInvalid { path: String, msg: String },
    /// Malformed input data (CSV loaders).
    #[error("invalid data: {0}")]
    InvalidData(String),
    /// Filesystem failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// CSV encoding or decoding failure.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    /// JSON encoding or decoding failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FusionError {
    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        FusionError::ConfigInvalid { path: path.into(), msg: msg.into() }
    }
}

/// Returns `DimensionMismatch` unless `got == expected`.
pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(FusionError::DimensionMismatch { expected, got })
    }
}
