//! Parametrized VI data model: operator, nonsmooth functional, solutions.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nonsmooth::Nonsmooth;

/// The map `A : P × X → Y` of the VI together with its partial derivatives.
pub trait Operator: Send + Sync {
    fn eval(&self, p: &DVector<f64>, x: &DVector<f64>) -> DVector<f64>;
    /// `A_x(p, x)`, an `dim_x × dim_x` matrix.
    fn jac_x(&self, p: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64>;
    /// `A_p(p, x)`, an `dim_x × dim_p` matrix.
    fn jac_p(&self, p: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64>;
}

/// `A(p, x) = M x + N p + b`.
#[derive(Debug, Clone)]
pub struct AffineOperator {
    pub m: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl AffineOperator {
    /// The projection-type operator `A(p, x) = x − p`.
    pub fn projection(dim: usize) -> Self {
        AffineOperator {
            m: DMatrix::identity(dim, dim),
            n: -DMatrix::identity(dim, dim),
            b: DVector::zeros(dim),
        }
    }
}

impl Operator for AffineOperator {
    fn eval(&self, p: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        &self.m * x + &self.n * p + &self.b
    }
    fn jac_x(&self, _p: &DVector<f64>, _x: &DVector<f64>) -> DMatrix<f64> {
        self.m.clone()
    }
    fn jac_p(&self, _p: &DVector<f64>, _x: &DVector<f64>) -> DMatrix<f64> {
        self.n.clone()
    }
}

/// Operator defined by closures (for non-affine problems).
pub struct ClosureOperator {
    pub eval: Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>,
    pub jac_x: Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    pub jac_p: Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>,
}

impl Operator for ClosureOperator {
    fn eval(&self, p: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        (self.eval)(p, x)
    }
    fn jac_x(&self, p: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        (self.jac_x)(p, x)
    }
    fn jac_p(&self, p: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        (self.jac_p)(p, x)
    }
}

/// A parametrized variational inequality
/// `⟨A(p, x̄), x − x̄⟩ + j(x) − j(x̄) ≥ 0 ∀x`.
#[derive(Clone)]
pub struct ViProblem {
    pub dim_x: usize,
    pub dim_p: usize,
    pub operator: Arc<dyn Operator>,
    pub nonsmooth: Nonsmooth,
    /// Lower bound `c` in `⟨A(p,x₁) − A(p,x₂), x₁ − x₂⟩ ≥ c‖x₁ − x₂‖²`.
    pub monotonicity_constant: f64,
}

/// Solver output.
#[derive(Debug, Clone)]
pub struct ViSolution {
    pub x_bar: DVector<f64>,
    /// Natural-map defect `‖x̄ − prox_{σj}(x̄ − σ A(p, x̄))‖` at the solver's σ.
    pub residual: f64,
    pub iterations: usize,
    pub multipliers: Option<Multipliers>,
}

/// Kind-specific multiplier payload.
#[derive(Debug, Clone)]
pub enum Multipliers {
    /// Saddle-point case: displacement `u` and per-cell `λ ≥ 0`.
    Saddle {
        u: DVector<f64>,
        lambda: DVector<f64>,
    },
}

impl ViProblem {
    /// Spectral-norm estimate of `A_x` sampled near `x`, used to derive the
    /// fixed-point step `σ = c / L²`.
    pub fn lipschitz_estimate(&self, p: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut l: f64 = spectral_norm(&self.operator.jac_x(p, x));
        for _ in 0..3 {
            let dx = DVector::from_fn(self.dim_x, |_, _| rng.gen_range(-1.0..1.0));
            let xs = x + dx * (0.1 * (1.0 + x.norm()));
            l = l.max(spectral_norm(&self.operator.jac_x(p, &xs)));
        }
        l.max(self.monotonicity_constant.max(1e-12))
    }

    /// The step the fixed-point solver derives at `(p, x)`.
    pub fn default_step(&self, p: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let l = self.lipschitz_estimate(p, x);
        self.monotonicity_constant / (l * l)
    }

    /// Natural-map defect `‖x − prox_{σj}(x − σ A(p,x))‖` for a given σ.
    pub fn natural_residual(&self, p: &DVector<f64>, x: &DVector<f64>, sigma: f64) -> f64 {
        let step = x - self.operator.eval(p, x) * sigma;
        match self.nonsmooth.prox(&step, sigma) {
            Ok(z) => (x - z).norm(),
            Err(_) => f64::INFINITY,
        }
    }

    /// Natural-map defect with the σ the solver would derive at `x`.
    /// Zero exactly at VI solutions (for convex `j` with exact prox).
    pub fn residual(&self, p: &DVector<f64>, x: &DVector<f64>) -> f64 {
        self.natural_residual(p, x, self.default_step(p, x))
    }

    /// Self-check: compare `jac_x`/`jac_p` against central finite differences.
    /// Returns the largest relative deviation.
    pub fn check_jacobians(&self, p: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let hx = 1e-6 * (1.0 + x.norm());
        let hp = 1e-6 * (1.0 + p.norm());
        let jx = self.operator.jac_x(p, x);
        let jp = self.operator.jac_p(p, x);
        let scale = 1.0 + jx.amax().max(jp.amax());
        let mut worst = 0.0f64;
        for k in 0..self.dim_x {
            let mut e = DVector::zeros(self.dim_x);
            e[k] = hx;
            let diff = (self.operator.eval(p, &(x + &e)) - self.operator.eval(p, &(x - &e)))
                / (2.0 * hx);
            for i in 0..self.dim_x {
                worst = worst.max((diff[i] - jx[(i, k)]).abs() / scale);
            }
        }
        for k in 0..self.dim_p {
            let mut e = DVector::zeros(self.dim_p);
            e[k] = hp;
            let diff = (self.operator.eval(&(p + &e), x) - self.operator.eval(&(p - &e), x))
                / (2.0 * hp);
            for i in 0..self.dim_x {
                worst = worst.max((diff[i] - jp[(i, k)]).abs() / scale);
            }
        }
        worst
    }

    /// Sampled lower bound for the strong-monotonicity ratio
    /// `⟨A(p,x₁)−A(p,x₂), x₁−x₂⟩ / ‖x₁−x₂‖²`.
    pub fn check_monotonicity(&self, p: &DVector<f64>, pairs: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = f64::INFINITY;
        for _ in 0..pairs {
            let x1 = DVector::from_fn(self.dim_x, |_, _| rng.gen_range(-2.0..2.0));
            let x2 = DVector::from_fn(self.dim_x, |_, _| rng.gen_range(-2.0..2.0));
            let dx = &x1 - &x2;
            let ns = dx.norm_squared();
            if ns < 1e-16 {
                continue;
            }
            let da = self.operator.eval(p, &x1) - self.operator.eval(p, &x2);
            worst = worst.min(da.dot(&dx) / ns);
        }
        worst
    }
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0f64, f64::max)
}
