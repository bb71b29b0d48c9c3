use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("Fock index {n} out of range for truncation dim {dim}")]
    FockOutOfRange { n: usize, dim: usize },

    #[error("truncation dimension {0} is too small (need at least 2)")]
    DimTooSmall(usize),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("mean occupation must be non-negative, got {0}")]
    NegativeOccupation(f64),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("photon number would exceed truncation K = {k} (tail mass {tail:.3e})")]
    TruncationOverflow { k: usize, tail: f64 },

    #[error("singular fit: {0}")]
    SingularFit(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("line search diverged after {0} halvings")]
    DivergentLineSearch(usize),

    #[error("NaN encountered in GRAPE gradient at step {0}")]
    GradientNan(usize),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
