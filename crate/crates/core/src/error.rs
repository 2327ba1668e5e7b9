use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A class of a multinomial-logit problem carries (almost) no weight.
    #[error("degenerate class {class}: total weight {weight:e}")]
    DegenerateClass { class: usize, weight: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A mixture component lost (almost) all of its responsibility mass.
    #[error("collapsed component {version}: responsibility mass {mass:e}")]
    CollapsedComponent { version: usize, mass: f64 },

    #[error("all mixture components underflow at unit {unit}")]
    Underflow { unit: usize },

    #[error("EM fit failed for treatment {treatment}: {reason}")]
    FitFailure { treatment: usize, reason: String },

    #[error("positivity violation at unit {unit} for (t={t}, v={v}): denominator {denominator:e}")]
    PositivityViolation {
        unit: usize,
        t: usize,
        v: usize,
        denominator: f64,
    },

    #[error("unknown estimand: {0}")]
    UnknownEstimand(String),

    #[error("bootstrap failed: {failed} of {total} resamples failed ({diagnostics})")]
    BootstrapFailure {
        failed: usize,
        total: usize,
        diagnostics: String,
    },

    #[error("monte carlo aborted: {failed} of {total} replicates failed ({diagnostics})")]
    MonteCarloFailure {
        failed: usize,
        total: usize,
        diagnostics: String,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("internal error: {0}")]
    Internal(String),

    /// Wraps an error with treatment/version context.
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
