use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("step index {t} out of range 1..={n_steps}")]
    StepIndex { t: usize, n_steps: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("score model does not provide {0}")]
    Capability(&'static str),

    #[error("dimension {dim} exceeds the dense limit {limit}; use the Hutchinson estimator instead")]
    DenseLimit { dim: usize, limit: usize },

    #[error("degenerate diffusion step: {0}")]
    DegenerateStep(String),

    #[error("non-finite state produced at step t={t}")]
    NonFinite { t: usize },
}

impl Error {
    pub(crate) fn shape(what: impl Into<String>) -> Self {
        Error::Shape(what.into())
    }

    pub(crate) fn config(what: impl Into<String>) -> Self {
        Error::Config(what.into())
    }
}

pub(crate) fn check_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape(format!("{name} has length {got}, expected {want}")));
    }
    Ok(())
}
