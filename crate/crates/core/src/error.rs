use thiserror::Error;

/// Errors produced by the VI and QP solvers.
#[derive(Debug, Error)]
pub enum SolverError {
    /// The step size of the fixed-point scheme could not be derived
    /// (requires a positive monotonicity constant).
    #[error("cannot derive a positive step size (monotonicity constant {0:.3e})")]
    InvalidStep(f64),

    /// Iteration cap reached before the residual tolerance.
    #[error("no convergence after {max_iters} iterations (residual {residual:.3e})")]
    NonConvergence { max_iters: usize, residual: f64 },

    /// The operator (plus curvature term) is not coercive on the relevant
    /// subspace; carries the offending eigenvalue estimate.
    #[error("operator not coercive (smallest eigenvalue {0:.3e})")]
    NotCoercive(f64),

    /// Equality constraints admit no feasible point.
    #[error("equality constraints infeasible (defect {0:.3e})")]
    Infeasible(f64),

    /// The proximal map is set-valued at the queried point.
    #[error("proximal map is set-valued at the queried point")]
    AmbiguousProx,

    /// Inconsistent dimensions in the input data.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Errors produced while constructing second subderivatives.
#[derive(Debug, Error)]
pub enum ConeError {
    /// The slope fails the normal-cone test at the base point.
    #[error("slope is not in the normal cone at the base point (defect {defect:.3e})")]
    NotNormal { defect: f64 },

    /// The base point is not feasible for the set.
    #[error("base point violates the set constraints by {0:.3e}")]
    NotFeasible(f64),

    /// No catalog entry for this functional kind.
    #[error("no closed-form subderivative for this functional kind")]
    Unsupported,
}
