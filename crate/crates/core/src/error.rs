use thiserror::Error;

/// Result alias used throughout the core crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Two operands that must share a length did not.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension {
        /// Length required by the operation.
        expected: usize,
        /// Length actually supplied.
        actual: usize,
    },
    /// A vector dimension of zero was requested.
    #[error("dimension must be positive")]
    ZeroDimension,
    /// An operation that averages over a batch received none.
    #[error("empty batch")]
    EmptyBatch,
    /// A NaN or infinity reached an operation that requires finite input.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    /// Cosine similarity is undefined for a zero vector.
    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,
    /// A scalar parameter was outside its valid range.
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter {
        /// Parameter name.
        name: &'static str,
        /// What was wrong with it.
        reason: &'static str,
    },
    /// Interpolation pairing needs at least two items.
    #[error("pairing requires at least two items, got {0}")]
    Pairing(usize),
    /// A rotated box does not overlap its scene at all.
    #[error("box lies entirely outside the scene")]
    BoxOutsideScene,
}

pub(crate) fn ensure_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension { expected, actual })
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
