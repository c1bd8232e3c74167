use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("formula syntax error at position {position}: {message}")]
    Syntax { position: usize, message: String },

    #[error("stage out of range: {0}")]
    StageOutOfRange(String),

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("missing covariate `{name}` at stage {stage}")]
    MissingCovariate { name: String, stage: usize },

    #[error("log of non-positive value {value} for covariate `{name}` at stage {stage}")]
    NonPositiveLog { name: String, stage: usize, value: f64 },

    #[error("actual treatment missing at stage {stage}")]
    MissingActual { stage: usize },

    #[error("proxy treatment missing at stage {stage}")]
    MissingProxy { stage: usize },

    #[error("no adherence probability available for stage {stage}")]
    MissingAdherence { stage: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("no convergence after {iterations} iterations (coefficient norm {coefficient_norm:.3e}): {reason}")]
    NonConvergence {
        iterations: usize,
        coefficient_norm: f64,
        reason: String,
    },

    #[error("ill-conditioned system (condition number {condition:.3e}): {context}")]
    IllConditioned { condition: f64, context: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("too many failed replicates: {failed} of {total} ({context})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        context: String,
    },
}

impl Error {
    pub(crate) fn at_stage(self, stage: usize) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Strips stage annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures caused by bad input rather than by the numerics.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self.root(),
            Error::Syntax { .. }
                | Error::StageOutOfRange(_)
                | Error::InvalidSpec(_)
                | Error::InvalidData(_)
                | Error::MissingCovariate { .. }
                | Error::NonPositiveLog { .. }
                | Error::MissingActual { .. }
                | Error::MissingProxy { .. }
                | Error::MissingAdherence { .. }
                | Error::Dimension(_)
        )
    }
}
