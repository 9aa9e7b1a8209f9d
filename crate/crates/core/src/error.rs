use thiserror::Error;

/// Errors raised by the simulation, sensitivity and optimization layers.
#[derive(Debug, Error)]
pub enum PwsError {
    #[error("non-finite value encountered in {0}")]
    Numerical(String),

    #[error("guard gradient vanishes at a point inside the regularization band (g = {guard:e})")]
    DegenerateGuard { guard: f64 },

    #[error("transversality violated on the switching surface: L_f1 g = {lf1:e}, L_f2 g = {lf2:e}")]
    TransversalityViolation { lf1: f64, lf2: f64 },

    #[error("sliding field undefined: |grad g . (f1 - f2)| = {0:e}")]
    DegenerateSliding(f64),

    #[error("more than {cap} switching-surface events; Zeno behavior suspected")]
    ZenoSuspected { cap: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cost term at t = {time} does not fall on the time grid")]
    TaskInfeasibleGrid { time: f64 },

    #[error("rate study errors are too small to fit a slope")]
    InsufficientDecay,

    #[error("differentiability audit failed: {0}")]
    AuditFailed(String),

    #[error("malformed trajectory file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl PwsError {
    /// Short machine-readable name, used in reports and by the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            PwsError::Numerical(_) => "NumericalError",
            PwsError::DegenerateGuard { .. } => "DegenerateGuard",
            PwsError::TransversalityViolation { .. } => "TransversalityViolation",
            PwsError::DegenerateSliding(_) => "DegenerateSliding",
            PwsError::ZenoSuspected { .. } => "ZenoSuspected",
            PwsError::Dimension(_) => "DimensionMismatch",
            PwsError::InvalidArgument(_) => "InvalidArgument",
            PwsError::TaskInfeasibleGrid { .. } => "TaskInfeasibleGrid",
            PwsError::InsufficientDecay => "InsufficientDecay",
            PwsError::AuditFailed(_) => "AuditFailed",
            PwsError::Format(_) => "FormatError",
            PwsError::Io(_) => "IoError",
            PwsError::Json(_) => "JsonError",
            PwsError::Csv(_) => "CsvError",
        }
    }
}

pub type Result<T> = std::result::Result<T, PwsError>;

pub(crate) fn ensure_finite_vec(v: &nalgebra::DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(PwsError::Numerical(what.to_string()))
    }
}

pub(crate) fn ensure_finite_mat(m: &nalgebra::DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(PwsError::Numerical(what.to_string()))
    }
}
