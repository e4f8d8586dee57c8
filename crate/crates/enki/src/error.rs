use thiserror::Error;

/// Errors produced by the ensemble machinery and the solver loop.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnkiError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not symmetric (relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("linear system is singular after jitter (smallest eigenvalue {min_eigenvalue:e})")]
    SingularSystem { min_eigenvalue: f64 },

    #[error("matrix is not positive semidefinite (eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("resampling draws are rank deficient: rank {got}, target rank {target}")]
    RankDeficientResample { target: usize, got: usize },

    #[error("forward model failed for member {member}: {reason}")]
    ModelEvaluation { member: usize, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("ensemble needs at least 2 members, got {0}")]
    TooFewMembers(usize),

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<EnkiError>,
    },
}

impl EnkiError {
    pub(crate) fn at(self, iteration: usize) -> Self {
        match self {
            e @ EnkiError::AtIteration { .. } => e,
            e => EnkiError::AtIteration {
                iteration,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, EnkiError>;
