use thiserror::Error;

/// Errors raised while loading or validating a model.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("failed to parse model config: {0}")]
    Parse(String),
    /// An invariant of the model is violated; `field` names the config field.
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

impl ModelError {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        ModelError::Invalid { field, reason: reason.into() }
    }

    /// Config field the error refers to, if any.
    pub fn field(&self) -> Option<&'static str> {
        match self {
            ModelError::Parse(_) => None,
            ModelError::Invalid { field, .. } => Some(field),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("overflow guard violated: {0}")]
    OverflowGuard(String),
    #[error("propagator not stochastic: {0}")]
    NotStochastic(String),
    #[error("invalid density matrix: {0}")]
    InvalidDensity(String),
    #[error("invalid population vector: {0}")]
    InvalidPopulation(String),
    #[error("ambiguous binning: {0}")]
    AmbiguousBinning(String),
    #[error("inapplicable regime: {0}")]
    InapplicableRegime(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
