use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KymError {
    #[error("non-Delzant polytope: {0}")]
    NonDelzant(String),
    #[error("unbounded or empty polytope: {0}")]
    Unbounded(String),
    #[error("grid not aligned with polytope: {0}")]
    GridAlignment(String),
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("missing facet trace for facet {0}")]
    MissingTrace(usize),
    #[error("Hessian of u not positive definite at node {node} (x = {x:?})")]
    NotPositiveDefinite { node: usize, x: [f64; 2] },
    #[error("negative curvature norm {value} at node {node}")]
    NegativeNorm { node: usize, value: f64 },
    #[error("states belong to different classes: {0}")]
    ClassMismatch(String),
    #[error("path too coarse: {0}")]
    PathTooCoarse(String),
    #[error("state is not Hermitian-Yang-Mills: ||r_hym||_L2 = {0:.3e}")]
    NotAtHym(f64),
    #[error("Newton reached the iteration cap ({iterations}) with residual {residual:.3e}")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("left the Kahler cone: {0}")]
    LeftKaehlerCone(String),
    #[error("singular Jacobian: {0}")]
    SingularJacobian(String),
    #[error("continuation step underflow at target {target}: step {step:.3e}")]
    StepUnderflow { target: usize, step: f64 },
    #[error("gradient flow used its step budget ({0} steps)")]
    StepBudgetExhausted(usize),
    #[error("geodesic leaves the Kahler cone at t = {0}")]
    LeavesCone(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corrupt state file: {0}")]
    CorruptState(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for KymError {
    fn from(e: std::io::Error) -> Self {
        KymError::Io(e.to_string())
    }
}

impl KymError {
    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            KymError::NonDelzant(_) => "NonDelzant",
            KymError::Unbounded(_) => "Unbounded",
            KymError::GridAlignment(_) => "GridAlignment",
            KymError::ShapeMismatch { .. } => "ShapeMismatch",
            KymError::MissingTrace(_) => "MissingTrace",
            KymError::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            KymError::NegativeNorm { .. } => "NegativeNorm",
            KymError::ClassMismatch(_) => "ClassMismatch",
            KymError::PathTooCoarse(_) => "PathTooCoarse",
            KymError::NotAtHym(_) => "NotAtHYM",
            KymError::MaxIterations { .. } => "MaxIterations",
            KymError::LeftKaehlerCone(_) => "LeftKaehlerCone",
            KymError::SingularJacobian(_) => "SingularJacobian",
            KymError::StepUnderflow { .. } => "StepUnderflow",
            KymError::StepBudgetExhausted(_) => "StepBudgetExhausted",
            KymError::LeavesCone(_) => "LeavesCone",
            KymError::Config(_) => "Config",
            KymError::CorruptState(_) => "CorruptState",
            KymError::Io(_) => "Io",
        }
    }
}

pub type Result<T> = std::result::Result<T, KymError>;
