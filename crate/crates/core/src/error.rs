use thiserror::Error;

/// Failure modes of the pipeline.
///
/// The variants fall into three families that the command-line front end maps
/// onto distinct exit codes: configuration problems, caller misuse, and
/// numerical failures (accuracy, degeneracies, singular coefficients).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum QbmError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("accuracy error: relative residual {residual:.3e} exceeds tolerance {tolerance:.3e}; try ds <= {suggested_ds:.3e}")]
    Accuracy {
        residual: f64,
        tolerance: f64,
        suggested_ds: f64,
    },

    #[error("singular boundary problem at t = {t}: v2(t) = {value:.3e} vanishes at grid resolution (conjugate point)")]
    SingularBoundary { t: f64, value: f64 },

    #[error("degenerate Wronskian at s = {s}: {value:.3e}")]
    Degenerate { s: f64, value: f64 },

    #[error("coefficient singularity at t = {t}: du1/ds(t) vanishes (Wronskian {value:.3e})")]
    CoefficientSingularity { t: f64, value: f64 },

    #[error("ill-conditioned coefficient extraction at t = {t}: {detail}")]
    Extraction { t: f64, detail: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("singular covariance: det = {0:.3e}")]
    SingularCovariance(f64),

    #[error("io error: {0}")]
    Io(String),
}

impl QbmError {
    pub fn is_config(&self) -> bool {
        matches!(self, QbmError::Config(_) | QbmError::Usage(_))
    }
}

impl From<std::io::Error> for QbmError {
    fn from(e: std::io::Error) -> Self {
        QbmError::Io(e.to_string())
    }
}

impl From<csv::Error> for QbmError {
    fn from(e: csv::Error) -> Self {
        QbmError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, QbmError>;
