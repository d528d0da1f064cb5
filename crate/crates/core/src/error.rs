use thiserror::Error;

/// Errors raised by the agent, the plant and the trial harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not symmetric positive definite ({context}): min eigenvalue {min_eigenvalue:e}")]
    NotPositiveDefinite {
        context: &'static str,
        min_eigenvalue: f64,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid degrees of freedom {dof} (must be > {min})")]
    InvalidDof { dof: f64, min: f64 },

    #[error("second moment undefined: degrees of freedom {dof} <= 2")]
    MomentUndefined { dof: f64 },

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("numerical breakdown at step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("config error (line {line}): {message}")]
    Config { line: usize, message: String },

    #[error("trial for seed {seed} failed: {source}")]
    SeedFailed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Short machine-readable classification used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidDof { .. } => "invalid_dof",
            Error::MomentUndefined { .. } => "moment_undefined",
            Error::NumericalBreakdown(_) => "numerical_breakdown",
            Error::AtStep { source, .. } => source.kind(),
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::Config { .. } => "config",
            Error::SeedFailed { source, .. } => source.kind(),
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
