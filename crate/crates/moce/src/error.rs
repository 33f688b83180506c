//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Vector or matrix dimensions do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// Two manifold values with different curvatures were combined.
    #[error("curvature mismatch: {left} vs {right}")]
    CurvatureMismatch { left: f64, right: f64 },

    /// A geometric precondition was violated (off-manifold point, bad curvature, ...).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Non-finite value where a finite one is required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Iterative solver failed to reach its tolerance. Carries the last
    /// iterate's ambient coordinates and the final gradient norm.
    #[error("no convergence after {iters} iterations (gradient norm {grad_norm:.3e})")]
    Convergence {
        iters: usize,
        grad_norm: f64,
        last_iterate: Vec<f64>,
    },

    /// An operation that needs at least one element received none.
    #[error("empty input: {0}")]
    Empty(&'static str),

    /// A parameter value is unusable (non-finite, out of range, zero direction, ...).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Training failure, annotated with the offending parameter path.
    #[error("training error at `{path}`: {detail}")]
    Training { path: String, detail: String },

    /// Dataset or configuration content is inconsistent.
    #[error("data error: {0}")]
    Data(String),

    /// Serialized artifact has an unsupported format version.
    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }
}
