//! Error type shared by the whole crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A value failed construction-time validation.
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    /// A matrix that must be symmetric positive definite is not.
    #[error("{what} is not symmetric positive definite")]
    NotPositiveDefinite { what: &'static str },

    /// The LQR gain denominator `R + B'PB` lost positive definiteness.
    #[error("LQR backward pass: R + B'PB not invertible at step {step}")]
    SingularGain { step: usize },

    /// The EKF innovation covariance could not be factorized.
    #[error("EKF update: innovation covariance not invertible ({detail})")]
    SingularInnovation { detail: String },

    /// A numerical failure inside a simulation trial, with provenance.
    #[error("trial failed at step {step} in {module}: {source}")]
    AtStep {
        step: usize,
        module: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    /// Attach trial provenance to an error.
    pub fn at_step(self, step: usize, module: &'static str) -> Self {
        Error::AtStep {
            step,
            module,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
