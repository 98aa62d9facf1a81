//! Saddle-point VI of the constrained quadratic program
//!
//! ```text
//!     minimize  ½⟨AΣ, Σ⟩   subject to  BΣ = ℓ,  |DΣᵢ| ≤ 1 per cell,
//! ```
//!
//! posed on the weighted space with inner product `⟨Σ, T⟩ = Σᵢ μᵢ Σᵢ·Tᵢ`.
//! Solved by a semismooth Newton iteration on the KKT system
//!
//! ```text
//!     AΣ + B'u + Σᵢ μᵢ λᵢ (D'D Σ)ᵢ = 0,    BΣ = ℓ,
//!     λᵢ = max(0, λᵢ + θ(|DΣᵢ|² − 1)/2),
//! ```
//!
//! warm-startable for continuation along load rays.

use nalgebra::{DMatrix, DVector};

use crate::error::SolverError;
use crate::nonsmooth::project_cell_ball;
use crate::TAU_ACT;

/// Data of the saddle problem. `a` and `b` are the matrices of the dual
/// pairings `⟨AΣ, T⟩ = T' a Σ` and `⟨BΣ, v⟩ = v' b Σ`; `d` maps a single
/// cell `ℝᵐ → ℝⁿ`; `weights` are the cell measures `μᵢ > 0`.
#[derive(Debug, Clone)]
pub struct SaddleProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub m: usize,
    pub n: usize,
    pub cells: usize,
    pub dim_v: usize,
}

#[derive(Debug, Clone)]
pub struct SaddleSolution {
    pub sigma: DVector<f64>,
    pub u: DVector<f64>,
    /// Per-cell multiplier, `λᵢ ≥ 0`, zero on cells with `|DΣᵢ| < 1`.
    pub lambda: DVector<f64>,
    /// Natural-map defect of the saddle VI (see [`natural_residual`]).
    pub residual: f64,
    pub iterations: usize,
}

impl SaddleProblem {
    pub fn dim_sigma(&self) -> usize {
        self.m * self.cells
    }

    /// `|DΣᵢ|` for each cell.
    pub fn cell_norms(&self, sigma: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.cells, |i, _| {
            (&self.d * sigma.rows(i * self.m, self.m)).norm()
        })
    }

    /// Dual vector of `Ξ = λ D'DΣ`: cell block `μᵢ λᵢ (D'D) Σᵢ`.
    pub fn normal_term(&self, sigma: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
        let dtd = self.d.transpose() * &self.d;
        let mut out = DVector::zeros(self.dim_sigma());
        for i in 0..self.cells {
            let block = &dtd * sigma.rows(i * self.m, self.m) * (self.weights[i] * lambda[i]);
            out.rows_mut(i * self.m, self.m).copy_from(&block);
        }
        out
    }

    /// Riesz map of the weighted inner product: `W⁻¹` applied to a dual vector.
    fn riesz(&self, dual: &DVector<f64>) -> DVector<f64> {
        let mut out = dual.clone();
        for i in 0..self.cells {
            let mut b = out.rows_mut(i * self.m, self.m);
            b /= self.weights[i];
        }
        out
    }

    /// Weighted norm on the Σ-space.
    pub fn weighted_norm(&self, sigma: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..self.cells {
            s += self.weights[i] * sigma.rows(i * self.m, self.m).norm_squared();
        }
        s.sqrt()
    }
}

/// Natural-map defect of `(Σ, u)` for the saddle VI with datum `ℓ`:
/// gradient step in the weighted metric, per-cell projection onto
/// `{|Dσ| ≤ 1}`, plus the equality defect of `BΣ = ℓ`.
pub fn natural_residual(
    sp: &SaddleProblem,
    ell: &DVector<f64>,
    sigma: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    let step_len = 1.0 / (1.0 + sp.a.norm());
    let grad = sp.riesz(&(&sp.a * sigma + sp.b.transpose() * u));
    let trial = sigma - grad * step_len;
    let mut proj = trial.clone();
    for i in 0..sp.cells {
        let cell = project_cell_ball(&sp.d, &trial.rows(i * sp.m, sp.m).clone_owned());
        proj.rows_mut(i * sp.m, sp.m).copy_from(&cell);
    }
    let d_sigma = sp.weighted_norm(&(sigma - proj));
    let d_eq = (&sp.b * sigma - ell).norm() * step_len;
    (d_sigma * d_sigma + d_eq * d_eq).sqrt()
}

/// Solve the saddle VI; returns `Σ`, the multiplier `u`, and the per-cell
/// plastic multiplier `λ`.
pub fn solve_saddle_vi(
    sp: &SaddleProblem,
    ell: &DVector<f64>,
    tol: f64,
) -> Result<SaddleSolution, SolverError> {
    let ns = sp.dim_sigma();
    let start = initial_point(sp, ell)?;
    solve_saddle_vi_warm(sp, ell, &start, &DVector::zeros(sp.dim_v), &DVector::zeros(if ns > 0 { sp.cells } else { 0 }), tol)
}

/// Warm-started variant for continuation along load rays.
pub fn solve_saddle_vi_warm(
    sp: &SaddleProblem,
    ell: &DVector<f64>,
    sigma0: &DVector<f64>,
    u0: &DVector<f64>,
    lambda0: &DVector<f64>,
    tol: f64,
) -> Result<SaddleSolution, SolverError> {
    let ns = sp.dim_sigma();
    let nv = sp.dim_v;
    let dtd = sp.d.transpose() * &sp.d;
    let theta = 1.0;

    let mut sigma = sigma0.clone();
    let mut u = u0.clone();
    let mut lambda = lambda0.clone();
    let mut best = f64::INFINITY;

    for iter in 0..200 {
        let res = natural_residual(sp, ell, &sigma, &u);
        let lambda_ok = (0..sp.cells).all(|i| {
            let v = (&sp.d * sigma.rows(i * sp.m, sp.m)).norm_squared();
            lambda[i] >= -TAU_ACT && lambda[i] * (1.0 - v).max(0.0) <= 1e-8
        });
        let stat = (&sp.a * &sigma + sp.b.transpose() * &u + sp.normal_term(&sigma, &lambda)).norm();
        if res <= tol && lambda_ok && stat <= tol.max(1e-9) * (1.0 + sp.a.norm()) {
            return Ok(SaddleSolution {
                sigma,
                u,
                lambda,
                residual: res,
                iterations: iter,
            });
        }
        best = best.min(res);

        // Active estimate and one semismooth Newton step on the KKT system.
        let active: Vec<usize> = (0..sp.cells)
            .filter(|&i| {
                let v = (&sp.d * sigma.rows(i * sp.m, sp.m)).norm_squared();
                lambda[i] + theta * (v - 1.0) / 2.0 > 0.0
            })
            .collect();
        let na = active.len();
        let dim = ns + nv + na;
        let mut mat = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);

        // Stationarity rows: A Σ⁺ + B'u⁺ + Σᵢ μᵢ (λᵢ D'D Σ⁺ᵢ + λ⁺ᵢ D'D Σᵢ − λᵢ D'D Σᵢ) = 0.
        mat.view_mut((0, 0), (ns, ns)).copy_from(&sp.a);
        for i in 0..sp.cells {
            let li = if active.contains(&i) { lambda[i] } else { 0.0 };
            let w = sp.weights[i];
            for r in 0..sp.m {
                for c in 0..sp.m {
                    mat[(i * sp.m + r, i * sp.m + c)] += w * li * dtd[(r, c)];
                }
            }
        }
        mat.view_mut((0, ns), (ns, nv))
            .copy_from(&sp.b.transpose());
        for (k, &i) in active.iter().enumerate() {
            let block = &dtd * sigma.rows(i * sp.m, sp.m) * sp.weights[i];
            for r in 0..sp.m {
                mat[(i * sp.m + r, ns + nv + k)] = block[r];
            }
            // The bilinear term contributes λᵢ μᵢ D'D Σᵢ on the right-hand side.
            let mut rows = rhs.rows_mut(i * sp.m, sp.m);
            rows += &dtd * sigma.rows(i * sp.m, sp.m) * (sp.weights[i] * lambda[i]);
        }
        // Equality rows.
        mat.view_mut((ns, 0), (nv, ns)).copy_from(&sp.b);
        rhs.rows_mut(ns, nv).copy_from(ell);
        // Active-constraint rows, linearized: (DΣᵢ)'D Σ⁺ᵢ = (1 + |DΣᵢ|²)/2.
        for (k, &i) in active.iter().enumerate() {
            let row = (&dtd * sigma.rows(i * sp.m, sp.m)).transpose();
            for c in 0..sp.m {
                mat[(ns + nv + k, i * sp.m + c)] = row[c];
            }
            let v = (&sp.d * sigma.rows(i * sp.m, sp.m)).norm_squared();
            rhs[ns + nv + k] = (1.0 + v) / 2.0;
        }

        let lu = mat.clone().full_piv_lu();
        let sol = match lu.solve(&rhs) {
            Some(s) => s,
            None => {
                // Degenerate KKT (e.g. B pins Σ on an active cell): take the
                // least-norm solution, which selects a valid multiplier split.
                let svd = mat.svd(true, true);
                svd.solve(&rhs, 1e-11)
                    .map_err(|_| SolverError::Infeasible(f64::NAN))?
            }
        };
        sigma = DVector::from(sol.rows(0, ns).clone_owned());
        u = DVector::from(sol.rows(ns, nv).clone_owned());
        lambda = DVector::zeros(sp.cells);
        for (k, &i) in active.iter().enumerate() {
            lambda[i] = sol[ns + nv + k];
        }
    }
    Err(SolverError::NonConvergence {
        max_iters: 200,
        residual: best,
    })
}

/// Equality-only start: solve the unconstrained saddle system; if the datum
/// is infeasible for `BΣ = ℓ`, report it.
fn initial_point(sp: &SaddleProblem, ell: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
    let ns = sp.dim_sigma();
    let nv = sp.dim_v;
    let mut mat = DMatrix::<f64>::zeros(ns + nv, ns + nv);
    mat.view_mut((0, 0), (ns, ns)).copy_from(&sp.a);
    mat.view_mut((0, ns), (ns, nv)).copy_from(&sp.b.transpose());
    mat.view_mut((ns, 0), (nv, ns)).copy_from(&sp.b);
    let mut rhs = DVector::<f64>::zeros(ns + nv);
    rhs.rows_mut(ns, nv).copy_from(ell);
    let sol = match mat.clone().full_piv_lu().solve(&rhs) {
        Some(s) => s,
        None => mat
            .svd(true, true)
            .solve(&rhs, 1e-11)
            .map_err(|_| SolverError::Infeasible(f64::NAN))?,
    };
    let sigma = DVector::from(sol.rows(0, ns).clone_owned());
    let defect = (&sp.b * &sigma - ell).norm();
    if defect > 1e-8 * (1.0 + ell.norm()) {
        return Err(SolverError::Infeasible(defect));
    }
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_cell() -> SaddleProblem {
        SaddleProblem {
            a: DMatrix::from_element(1, 1, 1.0),
            b: DMatrix::from_element(1, 1, 1.0),
            d: DMatrix::from_element(1, 1, 1.0),
            weights: DVector::from_element(1, 1.0),
            m: 1,
            n: 1,
            cells: 1,
            dim_v: 1,
        }
    }

    #[test]
    fn one_cell_inactive() {
        // KKT by hand: Σ = 0.5, λ = 0, u = −0.5.
        let sp = one_cell();
        let sol = solve_saddle_vi(&sp, &DVector::from_row_slice(&[0.5]), 1e-10).unwrap();
        assert_relative_eq!(sol.sigma[0], 0.5, epsilon = 1e-10);
        assert_relative_eq!(sol.lambda[0], 0.0, epsilon = 1e-10);
        assert_relative_eq!(sol.u[0], -0.5, epsilon = 1e-10);
    }

    #[test]
    fn one_cell_active_boundary() {
        // BΣ = 1 forces Σ = 1; stationarity leaves λ = −1 − u with λ ≥ 0
        // selected by the least-norm fallback.
        let sp = one_cell();
        let sol = solve_saddle_vi(&sp, &DVector::from_row_slice(&[1.0]), 1e-9).unwrap();
        assert_relative_eq!(sol.sigma[0], 1.0, epsilon = 1e-9);
        assert!(sol.lambda[0] >= -1e-9);
        assert_relative_eq!(sol.lambda[0] + sol.u[0], -1.0, epsilon = 1e-8);
    }

    #[test]
    fn one_cell_zero_datum() {
        let sp = one_cell();
        let sol = solve_saddle_vi(&sp, &DVector::zeros(1), 1e-12).unwrap();
        assert_relative_eq!(sol.sigma[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(sol.u[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(sol.lambda[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn two_cell_activity() {
        // min ½(Σ₁² + Σ₂²) s.t. Σ₁ + Σ₂ = 1.6, |Σᵢ| ≤ 1: solution (0.8, 0.8).
        let sp = SaddleProblem {
            a: DMatrix::identity(2, 2),
            b: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            d: DMatrix::from_element(1, 1, 1.0),
            weights: DVector::from_element(2, 1.0),
            m: 1,
            n: 1,
            cells: 2,
            dim_v: 1,
        };
        let sol = solve_saddle_vi(&sp, &DVector::from_row_slice(&[1.6]), 1e-10).unwrap();
        assert_relative_eq!(sol.sigma[0], 0.8, epsilon = 1e-9);
        assert_relative_eq!(sol.sigma[1], 0.8, epsilon = 1e-9);
        // And with a datum that forces activation: Σ₁ + Σ₂ = 1.9 keeps both
        // cells strictly inside only if feasible; here both stay at 0.95.
        let sol = solve_saddle_vi(&sp, &DVector::from_row_slice(&[1.9]), 1e-10).unwrap();
        assert!(sp.cell_norms(&sol.sigma).amax() <= 1.0 + 1e-9);
    }
}
