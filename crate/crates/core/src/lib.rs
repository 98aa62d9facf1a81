//! Solvers and differential-sensitivity machinery for finite-dimensional
//! variational inequalities (VIs) of the first and second kind.
//!
//! The crate is organized around a single pipeline:
//!
//! 1. [`problem`] describes a parametrized VI: find `x` with
//!    `⟨A(p,x), z − x⟩ + j(z) − j(x) ≥ 0` for all `z`, where `j` is one of the
//!    nonsmooth functionals in [`nonsmooth`].
//! 2. [`solver`] computes solutions by a projected fixed-point iteration with
//!    an optional active-face Newton polish; [`saddle`] handles the
//!    saddle-point VI of the constrained quadratic program
//!    `min ½⟨AΣ,Σ⟩ s.t. BΣ = ℓ, |DΣᵢ| ≤ 1`.
//! 3. [`subderiv`] catalogs second subderivatives `Q_j^{x,g}` together with
//!    their reduced critical cones, and [`oracle`] evaluates the defining
//!    inf–liminf numerically as an independent cross-check.
//! 4. [`deriv`] solves the derivative VI
//!    `⟨A_p q + A_x y, z − y⟩ + ½Q(z) − ½Q(y) ≥ 0` on the reduced critical
//!    cone and checks the first-order identities satisfied by its solution.
//! 5. [`fd`] drives difference quotients `(x(p₀+tq) − x(p₀))/t` along
//!    parameter rays and verifies their convergence to the derivative-VI
//!    solution, including the second-order quotient limit.

pub mod cone;
pub mod deriv;
pub mod error;
pub mod fd;
pub mod nonsmooth;
pub mod oracle;
pub mod problem;
pub mod qp;
pub mod saddle;
pub mod solver;
pub mod subderiv;

pub use cone::ConeSpec;
pub use deriv::{solve_derivative_vi, DerivativeSolution};
pub use error::{ConeError, SolverError};
pub use fd::{run_ray, verify_convergence, FdReport};
pub use nonsmooth::Nonsmooth;
pub use oracle::{q_bruteforce_oracle, OracleOptions};
pub use problem::{AffineOperator, Operator, ViProblem, ViSolution};
pub use saddle::{solve_saddle_vi, SaddleProblem, SaddleSolution};
pub use solver::solve_elliptic_vi;
pub use subderiv::QuadraticSubderivative;

/// Tolerance for activity decisions (`|DΣᵢ| = 1`, `gᵢ = 0`, cone membership).
///
/// Double-precision KKT residuals sit near 1e-12; 1e-9 leaves margin.
pub const TAU_ACT: f64 = 1e-9;

/// Default natural-map residual tolerance for the VI solvers.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Default iteration cap for the fixed-point solvers.
pub const DEFAULT_MAX_ITERS: usize = 100_000;
