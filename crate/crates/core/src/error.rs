use std::path::PathBuf;

/// Errors produced by the estimation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("data model is not invertible: forward model output component {component} is zero")]
    NonInvertible { component: usize },

    #[error("all inner-loop log terms are -inf; evidence estimate is degenerate")]
    DegenerateEvidence,

    #[error("tabulated model has no entry for {0}")]
    MissingEntry(String),

    #[error("tabulated model {path}: {message}")]
    Table { path: PathBuf, message: String },

    #[error("invalid allocation: {0}")]
    InvalidAllocation(String),

    #[error("covariance of control-variate differences is singular or ill-conditioned")]
    SingularCovariance,

    #[error("missing utility evaluations: {0}")]
    MissingEvaluations(String),

    #[error("budget {budget} cannot afford one high-fidelity evaluation of cost {cost}")]
    InfeasibleBudget { budget: f64, cost: f64 },

    #[error("empty feasible set: {0}")]
    EmptyFeasibleSet(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by invalid user input (config, files, schemas)
    /// rather than numerical failures.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidSpec(_)
                | Error::Config(_)
                | Error::Table { .. }
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Csv(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
