use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("steady-state system is singular: {0}")]
    SingularSystem(String),
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("riccati iteration did not converge after {iters} iterations (residual {residual:e})")]
    RiccatiNonConvergence { iters: usize, residual: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("barrier domain error: log argument {arg:e} at row {row}")]
    BarrierDomain { row: usize, arg: f64 },
    #[error("primal step stalled after {halvings} halvings")]
    StalledStep { halvings: usize },
    #[error("warm start violates row {row} by {violation:e}")]
    InfeasibleWarmStart { row: usize, violation: f64 },
    #[error("problem is infeasible: {0}")]
    InfeasibleProblem(String),
    #[error("state violates tightened constraint row {row} by {violation:e}")]
    InfeasibleState { row: usize, violation: f64 },
    #[error("candidate is infeasible: max violation {0:e}")]
    InfeasibleCandidate(f64),
    #[error("iteration limit of {0} reached")]
    MaxIterations(usize),
    #[error("rejection sampling exhausted after {0} draws")]
    RejectionExhausted(usize),
    #[error("step called on a terminated episode")]
    StepAfterTerminal,
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate action bounds: low {low} >= high {high}")]
    DegenerateBounds { low: f64, high: f64 },
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("non-finite loss in {0}")]
    NonFiniteLoss(String),
    #[error("decomposition violated: {0}")]
    DecompositionViolated(String),
    #[error("regularizer bound violated: {0}")]
    BoundViolated(String),
    #[error("corrupt checkpoint container at offset {offset}: {reason}")]
    CorruptContainer { offset: usize, reason: String },
    #[error("mismatched step grids: {0}")]
    MismatchedGrids(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
