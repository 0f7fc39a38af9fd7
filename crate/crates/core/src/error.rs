use thiserror::Error;

/// Errors raised by the recovery library.
#[derive(Debug, Error)]
pub enum MraError {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("signal must be non-empty with finite entries")]
    InvalidSignal,

    #[error("reference signal has zero norm")]
    ZeroNorm,

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("observation set carries no true shifts")]
    MissingShifts,

    #[error("noise level must be positive for likelihood-based weights (sigma = {0})")]
    ZeroSigma(f64),

    #[error("weights must be strictly positive (found {0})")]
    NonPositiveWeight(f64),

    #[error("tensor of order {order} at length {len} exceeds budget (max order {max_order}, max entries {max_entries})")]
    BudgetExceeded {
        order: usize,
        len: usize,
        max_order: usize,
        max_entries: usize,
    },

    #[error("period {period} must divide {len} and be smaller than {len}/2")]
    InvalidPeriod { period: usize, len: usize },

    #[error("first moment has vanishing sum ({dc_sum:e}); cannot fix the scale")]
    ZeroDc { dc_sum: f64 },

    #[error("power spectrum entry {ps_min:e} below floor {floor:e}")]
    VanishingSpectrum { ps_min: f64, floor: f64 },

    #[error("eigenvalue gap {gap:e} below tolerance {tol:e}; distribution entries are not distinct")]
    DegenerateEigengap { gap: f64, tol: f64 },

    #[error("no eigenvector is orthogonal to its half-length translation (best |<u, R u>| = {best:e})")]
    NoOrthogonalEigenvector { best: f64 },

    #[error("the two (signal, distribution) pairs agree on all moments up to order {0}")]
    Indistinguishable(usize),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MraError>;

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(MraError::LengthMismatch { expected, actual })
    }
}
