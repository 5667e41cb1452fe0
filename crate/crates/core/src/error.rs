use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scenario tree: {0}")]
    InvalidTree(String),

    #[error("stage {stage} out of range (tree has {stages} stages)")]
    StageOutOfRange { stage: usize, stages: usize },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("invalid set descriptor: {0}")]
    InvalidSet(String),

    #[error("set is empty")]
    EmptySet,

    #[error("point is not in the set (distance {distance:e})")]
    NotInSet { distance: f64 },

    #[error("descriptor is not a cone: {0}")]
    NotACone(String),

    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    #[error("unknown nonlinearity `{0}`")]
    UnknownNonlinearity(String),

    #[error("jacobian block ({stage}, {block}) requested with block > stage")]
    NonCausalBlock { stage: usize, block: usize },

    #[error("invalid objective: {0}")]
    InvalidObjective(String),

    #[error("exact subgradients require p = 2, got p = {0}")]
    UnsupportedNorm(f64),

    #[error("invalid norm exponent {0}, need p >= 1")]
    InvalidNorm(f64),

    #[error("node system infeasible at stage {stage}, node {node}")]
    NodeInfeasible { stage: usize, node: u64 },

    #[error("node solve did not converge at stage {stage}, node {node} (residual {residual:e})")]
    NodeSolveFailed { stage: usize, node: u64, residual: f64 },

    #[error("point is infeasible: {0}")]
    InfeasiblePoint(String),

    #[error("certificate rejected: {0}")]
    CertificateRejected(String),

    #[error("no certificate found: best stationarity residual {residual:e}")]
    NoCertificate { residual: f64 },

    #[error("problem too large for brute force: total dimension {0} > 10")]
    TooLarge(usize),

    #[error("no feasible point found on the search grid")]
    EmptyGrid,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema error at {pointer}: {message}")]
    Schema { pointer: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn schema(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}
