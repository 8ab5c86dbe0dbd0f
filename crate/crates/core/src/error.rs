use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Concept tokens carry (numerically) no probability mass.
    #[error("degenerate concept: {0}")]
    DegenerateConcept(String),

    /// LayerNorm input with vanishing spread, or similar.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate metric: {0}")]
    DegenerateMetric(String),

    /// The covector has a component outside the range of the metric.
    #[error("concept unreachable: covector leaves Range(G) with relative residual {residual:.3e}")]
    UnreachableConcept { residual: f64 },

    #[error("infeasible proxy: {0}")]
    InfeasibleProxy(String),

    #[error("covector is orthogonal to the steering subspace")]
    InfeasibleSubspace,

    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// Two algebraic routes to the same quantity disagree.
    #[error("identity violated for {what}: {lhs:e} vs {rhs:e}")]
    IdentityViolation { what: &'static str, lhs: f64, rhs: f64 },

    #[error("weight file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
