use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("non-finite value while evaluating {0}")]
    Overflow(String),

    #[error("coefficient is not elliptic: smallest eigenvalue {min_eig:.3e} at {location}")]
    Ellipticity { min_eig: f64, location: String },

    #[error("monotonicity violated: {0}")]
    Monotonicity(String),

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:.3e})")]
    Solver {
        solver: &'static str,
        iterations: usize,
        residual: f64,
        trace: Vec<f64>,
    },

    #[error("statistics need at least 2 samples, got {0}")]
    Statistics(usize),

    #[error("grid spacing {spacing:.4e} does not resolve eps2 = {eps2:.4e} (need h <= eps2/8)")]
    Resolution { spacing: f64, eps2: f64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed field file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable numeric code, shared with the C ABI.
    pub fn code(&self) -> i32 {
        match self {
            Error::Parameter(_) => 1,
            Error::Shape { .. } => 2,
            Error::Overflow(_) => 3,
            Error::Ellipticity { .. } => 4,
            Error::Monotonicity(_) => 5,
            Error::Solver { .. } => 6,
            Error::Statistics(_) => 7,
            Error::Resolution { .. } => 8,
            Error::Invariant(_) => 9,
            Error::Unsupported(_) => 10,
            Error::Config(_) => 11,
            Error::Io { .. } => 12,
            Error::Format(_) => 13,
        }
    }
}
