use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("run diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("symmetric eigensolver did not converge")]
    EigenNonConvergence,

    #[error("operator is not positive semidefinite: min eigenvalue {min} vs spectral radius {radius}")]
    NotPsd { min: f64, radius: f64 },

    #[error("basis discontinuity: minimum matched overlap {min_overlap:.3e} below floor {floor}")]
    BasisDiscontinuity { min_overlap: f64, floor: f64 },

    #[error("need at least {needed} usable steps, found {found}")]
    TooFewSteps { needed: usize, found: usize },

    #[error("every step was flagged; no usable stencil")]
    AllStepsFlagged,

    #[error("retained mode {index} has nonpositive eigenvalue {value}")]
    NonPositiveEigenvalue { index: usize, value: f64 },

    #[error("drift spec has no cutoff constant K")]
    MissingK,

    #[error("CFL violation: Courant number {courant:.4} exceeds 1")]
    Cfl { courant: f64 },

    #[error("negative density {value:e} in cell {cell}")]
    NegativeDensity { cell: usize, value: f64 },

    #[error("insufficient support: need {needed} points in window, found {found}")]
    InsufficientSupport { needed: usize, found: usize },

    #[error("no frontier crossing inside the grid")]
    NoCrossing,

    #[error("nonpositive value {value} at abscissa {at} inside fit window")]
    NonPositiveValue { at: f64, value: f64 },

    #[error("degenerate fit window: {0}")]
    DegenerateWindow(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidSpec(_) | Error::Cfl { .. } => 2,
            Error::Divergence { .. } | Error::EigenNonConvergence | Error::NegativeDensity { .. } => 3,
            Error::CheckFailed(_) => 4,
            _ => 1,
        }
    }
}
