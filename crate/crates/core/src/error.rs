use thiserror::Error;

pub type Result<T> = std::result::Result<T, MassError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MassError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("metric is not flat near the marked point: |phi| = {value:e} at node {node}")]
    FlatnessViolation { node: usize, value: f64 },

    #[error("potential does not vanish near the marked point: |f| = {value:e} at node {node}")]
    PotentialSupport { node: usize, value: f64 },

    #[error("geometry error: {0}")]
    GeometryError(String),

    #[error("under-resolved: {0}")]
    ResolutionError(String),

    #[error("operands live on different grids")]
    GridMismatch,

    #[error("field contains non-finite value at node {0}")]
    NonFinite(usize),

    #[error(
        "solver did not converge: relative residual {residual:e} after {iterations} iterations"
    )]
    NotConverged { residual: f64, iterations: usize },

    #[error("operator is not positive: {0}")]
    NotPositive(String),

    #[error("Dirichlet domain has no interior nodes")]
    EmptyDomain,

    #[error("domain does not contain the support of the cutoff (node {node} at r = {radius})")]
    DomainTooSmall { node: usize, radius: f64 },

    #[error("u(p) = {0:e} but the functional I requires u(p) = 0")]
    CenterNotZero(f64),

    #[error("Green function not positive at node {node}: G = {value:e}")]
    PositivityViolation { node: usize, value: f64 },

    #[error("property violated: {0}")]
    PropertyViolation(String),

    #[error("lowest eigenvalue stays positive up to a = {a_max}")]
    NoSignChange { a_max: f64 },

    #[error("construction failed: {0}")]
    ConstructionFailed(String),

    #[error("expression error: {0}")]
    Expression(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl MassError {
    /// Validation errors are the caller's fault; the CLI maps them to exit code 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            MassError::InvalidGrid(_)
                | MassError::FlatnessViolation { .. }
                | MassError::PotentialSupport { .. }
                | MassError::GeometryError(_)
                | MassError::ResolutionError(_)
                | MassError::GridMismatch
                | MassError::NonFinite(_)
                | MassError::EmptyDomain
                | MassError::DomainTooSmall { .. }
                | MassError::CenterNotZero(_)
                | MassError::Expression(_)
                | MassError::Config(_)
        )
    }

    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            MassError::NotConverged { .. }
                | MassError::NotPositive(_)
                | MassError::NoSignChange { .. }
                | MassError::ConstructionFailed(_)
        )
    }

    /// A computed quantity contradicts an invariant; the CLI exits with 4.
    pub fn is_property_violation(&self) -> bool {
        matches!(
            self,
            MassError::PositivityViolation { .. } | MassError::PropertyViolation(_)
        )
    }
}

impl From<std::io::Error> for MassError {
    fn from(e: std::io::Error) -> Self {
        MassError::Io(e.to_string())
    }
}
