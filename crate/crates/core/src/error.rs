use thiserror::Error;

#[derive(Debug, Error)]
pub enum VmptError {
    #[error("initial guess violates the feasible set by {violation:.3e}")]
    InfeasibleStart { violation: f64 },

    #[error("iterate {k} violates the feasible set by {violation:.3e}")]
    InfeasibleIterate { k: usize, violation: f64 },

    #[error("Armijo backtracking failed after {backtracks} reductions")]
    LineSearchFailure { backtracks: usize },

    #[error("line search needs a descent direction, got slope {slope:.6e}")]
    NotDescentDirection { slope: f64 },

    #[error("subproblem failed: {0}")]
    SubproblemFailure(Box<VmptError>),

    #[error("primal-dual active set did not settle within {iterations} iterations")]
    MaxPdasIterations { iterations: usize },

    #[error("subproblem operator is not positive definite on the inactive set")]
    IndefiniteOperator,

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("state system is singular (empty Dirichlet boundary or void material)")]
    SingularSystem,

    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),

    #[error("volume-fraction constraint cannot be met: {0}")]
    InfeasibleVolumeFraction(String),

    #[error("descent inequality violated at iteration {k}: slope {slope:.6e} > bound {bound:.6e}")]
    DescentViolation { k: usize, slope: f64, bound: f64 },

    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),

    #[error("linear solver: {0}")]
    LinearSolver(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VmptError>;
