use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema violation in {file}: {message}")]
    Schema { file: String, message: String },

    #[error("referential integrity: {0}")]
    Referential(String),

    #[error("duplicate measurement: subject {subject}, covariate {covariate}, time {time}")]
    DuplicateMeasurement {
        subject: String,
        covariate: String,
        time: f64,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty at-risk set at landmark {0}")]
    EmptyRiskSet(f64),

    #[error("subject {subject} has no measurement of {covariate} at or before the landmark")]
    MissingHistory { subject: String, covariate: String },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },

    #[error("fitted means hit the link boundary: {0}")]
    LinkBoundary(String),

    #[error("no events available: {0}")]
    NoEvents(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("{failed} of {total} replicates failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of numerical routines, as opposed to bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular(_)
                | Error::NonConvergence { .. }
                | Error::LinkBoundary(_)
                | Error::Degenerate(_)
                | Error::TooManyFailures { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
