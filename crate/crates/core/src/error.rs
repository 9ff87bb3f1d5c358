use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("zero-norm vector has no direction")]
    ZeroNorm,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("label {label} out of range 1..={count}")]
    LabelOutOfRange { label: usize, count: usize },

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("degenerate tail: {0}")]
    DegenerateTail(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("weibull shape estimation did not converge")]
    NoConvergence,

    #[error("negative distance {0}")]
    NegativeDistance(f64),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("model file: {0}")]
    Format(String),

    #[error("all {count} grid cells failed; first: {first}")]
    AllCellsFailed { count: usize, first: String },

    #[error("{0} unknown samples were read before test evaluation")]
    IsolationViolated(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used in the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Empty(_) => "empty",
            Error::NonFinite(_) => "non_finite",
            Error::ZeroNorm => "zero_norm",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::EmptyClass { .. } => "empty_class",
            Error::DegenerateTail(_) => "degenerate_tail",
            Error::InsufficientSamples(_) => "insufficient_samples",
            Error::NoConvergence => "no_convergence",
            Error::NegativeDistance(_) => "negative_distance",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::AllCellsFailed { .. } => "all_cells_failed",
            Error::IsolationViolated(_) => "isolation_violated",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
