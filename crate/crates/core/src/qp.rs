//! Dense strictly convex quadratic programs
//!
//! ```text
//!     minimize    ½ x' H x + c' x
//!     subject to  E x = e
//!                 G x ≤ g
//! ```
//!
//! solved by a primal-dual active-set method (one KKT solve per active-set
//! guess). On the rare cycling failure the solver falls back to accelerated
//! projected gradient on the dual and polishes the detected active set with
//! an exact KKT solve. `H` must be positive definite.

use nalgebra::{DMatrix, DVector};

use crate::error::SolverError;

/// Result of a QP solve.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of the equality constraints, same order as the rows of `E`.
    pub eq_multipliers: DVector<f64>,
    /// Multipliers of the inequality constraints (≥ 0), same order as `G`.
    pub ineq_multipliers: DVector<f64>,
    /// Indices of the active inequality rows.
    pub active: Vec<usize>,
    pub iterations: usize,
}

const FEAS_TOL: f64 = 1e-10;
const MAX_OUTER: usize = 200;

/// Solve the QP. `eq`/`ineq` are `(matrix, rhs)` pairs; pass `None` when absent.
pub fn solve_qp(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    eq: Option<(&DMatrix<f64>, &DVector<f64>)>,
    ineq: Option<(&DMatrix<f64>, &DVector<f64>)>,
) -> Result<QpSolution, SolverError> {
    let n = c.len();
    if h.nrows() != n || h.ncols() != n {
        return Err(SolverError::Dimension(format!(
            "H is {}x{}, expected {}x{}",
            h.nrows(),
            h.ncols(),
            n,
            n
        )));
    }
    if let Some((em, ev)) = eq {
        if em.ncols() != n || em.nrows() != ev.len() {
            return Err(SolverError::Dimension("equality block".into()));
        }
    }
    if let Some((gm, gv)) = ineq {
        if gm.ncols() != n || gm.nrows() != gv.len() {
            return Err(SolverError::Dimension("inequality block".into()));
        }
    }

    match pdas(h, c, eq, ineq) {
        Ok(sol) => Ok(sol),
        Err(_) => dual_fallback(h, c, eq, ineq),
    }
}

/// Convenience: equality-constrained QP (or unconstrained when `eq` is `None`).
pub fn solve_eq_qp(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    eq: Option<(&DMatrix<f64>, &DVector<f64>)>,
) -> Result<QpSolution, SolverError> {
    solve_qp(h, c, eq, None)
}

fn pdas(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    eq: Option<(&DMatrix<f64>, &DVector<f64>)>,
    ineq: Option<(&DMatrix<f64>, &DVector<f64>)>,
) -> Result<QpSolution, SolverError> {
    let n = c.len();
    let n_ineq = ineq.map_or(0, |(gm, _)| gm.nrows());

    let mut mu = DVector::<f64>::zeros(n_ineq);
    let mut x = DVector::<f64>::zeros(n);
    let mut active: Vec<usize> = Vec::new();
    let mut seen: Vec<Vec<usize>> = Vec::new();
    let scale = 1.0 + c.amax() + h.amax();

    for iter in 0..MAX_OUTER {
        // Active estimate from the complementarity residual.
        if let Some((gm, gv)) = ineq {
            let slack = gm * &x - gv;
            active = (0..n_ineq)
                .filter(|&i| mu[i] + slack[i] > 0.0)
                .collect();
        }
        if seen.contains(&active) && iter > 0 {
            return Err(SolverError::NonConvergence {
                max_iters: iter,
                residual: f64::NAN,
            });
        }
        seen.push(active.clone());

        let (x_new, nu, mu_act) = kkt_solve(h, c, eq, ineq, &active)?;
        x = x_new;
        mu.fill(0.0);
        for (k, &i) in active.iter().enumerate() {
            mu[i] = mu_act[k];
        }

        // Optimal iff primal feasible and multipliers nonnegative.
        let mut ok = true;
        if let Some((gm, gv)) = ineq {
            let slack = gm * &x - gv;
            for i in 0..n_ineq {
                if !active.contains(&i) && slack[i] > FEAS_TOL * scale {
                    ok = false;
                }
            }
            for &i in &active {
                if mu[i] < -FEAS_TOL * scale {
                    ok = false;
                }
            }
        }
        if ok {
            // Clip the numerically tiny negative multipliers introduced above.
            for v in mu.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            return Ok(QpSolution {
                x,
                eq_multipliers: nu,
                ineq_multipliers: mu,
                active,
                iterations: iter + 1,
            });
        }
    }
    Err(SolverError::NonConvergence {
        max_iters: MAX_OUTER,
        residual: f64::NAN,
    })
}

/// Solve the equality KKT system for a fixed working set of inequality rows.
/// Returns `(x, eq multipliers, working-set multipliers)`.
fn kkt_solve(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    eq: Option<(&DMatrix<f64>, &DVector<f64>)>,
    ineq: Option<(&DMatrix<f64>, &DVector<f64>)>,
    active: &[usize],
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>), SolverError> {
    let n = c.len();
    let p = eq.map_or(0, |(em, _)| em.nrows());
    let q = active.len();

    // Collect the constraint rows of the working set.
    let mut rows = DMatrix::<f64>::zeros(p + q, n);
    let mut rhs_c = DVector::<f64>::zeros(p + q);
    if let Some((em, ev)) = eq {
        rows.rows_mut(0, p).copy_from(em);
        rhs_c.rows_mut(0, p).copy_from(ev);
    }
    if let Some((gm, gv)) = ineq {
        for (k, &i) in active.iter().enumerate() {
            rows.row_mut(p + k).copy_from(&gm.row(i));
            rhs_c[p + k] = gv[i];
        }
    }

    // Drop dependent working rows so the bordered system stays nonsingular.
    let keep = independent_rows(&rows);
    let m = keep.len();
    let mut a = DMatrix::<f64>::zeros(n + m, n + m);
    a.view_mut((0, 0), (n, n)).copy_from(h);
    for (k, &r) in keep.iter().enumerate() {
        for j in 0..n {
            a[(j, n + k)] = rows[(r, j)];
            a[(n + k, j)] = rows[(r, j)];
        }
    }
    let mut b = DVector::<f64>::zeros(n + m);
    for j in 0..n {
        b[j] = -c[j];
    }
    for (k, &r) in keep.iter().enumerate() {
        b[n + k] = rhs_c[r];
    }

    let lu = a.clone().full_piv_lu();
    let sol = match lu.solve(&b) {
        Some(s) => s,
        None => {
            // Degenerate bordered system: take the least-norm solution.
            let svd = a.svd(true, true);
            svd.solve(&b, 1e-12)
                .map_err(|_| SolverError::Infeasible(f64::NAN))?
        }
    };
    let x = DVector::from(sol.rows(0, n).clone_owned());

    // Verify the retained rows actually satisfy their right-hand sides.
    for r in 0..p + q {
        let defect = (rows.row(r) * &x)[0] - rhs_c[r];
        if defect.abs() > 1e-7 * (1.0 + rhs_c[r].abs()) {
            return Err(SolverError::Infeasible(defect.abs()));
        }
    }

    // Scatter the multipliers of the kept rows back to the full working set.
    // Convention: H x + c + E'ν + G'μ = 0, so the multipliers equal the
    // bordered solution entries directly.
    let mut full = DVector::<f64>::zeros(p + q);
    for (k, &r) in keep.iter().enumerate() {
        full[r] = sol[n + k];
    }
    let nu = DVector::from(full.rows(0, p).clone_owned());
    let mu_act = DVector::from(full.rows(p, q).clone_owned());
    Ok((x, nu, mu_act))
}

/// Indices of a maximal linearly independent subset of rows.
fn independent_rows(rows: &DMatrix<f64>) -> Vec<usize> {
    let m = rows.nrows();
    if m == 0 {
        return Vec::new();
    }
    let mut keep: Vec<usize> = Vec::new();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for r in 0..m {
        let mut v = rows.row(r).transpose();
        let norm0 = v.norm();
        if norm0 < 1e-13 {
            continue;
        }
        for b in &basis {
            let proj = v.dot(b);
            v -= b * proj;
        }
        if v.norm() > 1e-10 * norm0 {
            basis.push(v.normalize());
            keep.push(r);
        }
    }
    keep
}

/// Accelerated projected gradient on the dual, then an exact polish on the
/// detected active set. Only reached when the active-set loop cycles.
fn dual_fallback(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    eq: Option<(&DMatrix<f64>, &DVector<f64>)>,
    ineq: Option<(&DMatrix<f64>, &DVector<f64>)>,
) -> Result<QpSolution, SolverError> {
    let n = c.len();
    let p = eq.map_or(0, |(em, _)| em.nrows());
    let q = ineq.map_or(0, |(gm, _)| gm.nrows());

    let h_inv = h
        .clone()
        .cholesky()
        .ok_or_else(|| SolverError::Dimension("H not positive definite".into()))?;

    // Stack the constraints: dual variable λ = (ν, μ) with μ ≥ 0.
    let mut a = DMatrix::<f64>::zeros(p + q, n);
    let mut b = DVector::<f64>::zeros(p + q);
    if let Some((em, ev)) = eq {
        a.rows_mut(0, p).copy_from(em);
        b.rows_mut(0, p).copy_from(ev);
    }
    if let Some((gm, gv)) = ineq {
        a.rows_mut(p, q).copy_from(gm);
        b.rows_mut(p, q).copy_from(gv);
    }

    // Dual gradient: ∇d(λ) = −A H⁻¹ (c + A'λ) − b; Lipschitz ≤ ‖A H⁻¹ A'‖.
    let aht = h_inv.solve(&a.transpose());
    let lips = (&a * &aht).norm() + 1e-12;
    let step = 1.0 / lips;

    let mut lam = DVector::<f64>::zeros(p + q);
    let mut lam_prev = lam.clone();
    for k in 0..50_000usize {
        let beta = k as f64 / (k as f64 + 3.0);
        let mut z = &lam + (&lam - &lam_prev) * beta;
        let x = -h_inv.solve(&(c + a.transpose() * &z));
        let grad = &a * &x - &b;
        z += grad * step;
        for i in p..p + q {
            if z[i] < 0.0 {
                z[i] = 0.0;
            }
        }
        lam_prev = lam;
        lam = z;
    }

    // Polish: treat clearly positive μ as active and re-solve exactly.
    let scale = 1.0 + lam.amax();
    let active: Vec<usize> = (0..q).filter(|&i| lam[p + i] > 1e-8 * scale).collect();
    let (x, nu, mu_act) = kkt_solve(h, c, eq, ineq, &active)?;
    let mut mu = DVector::<f64>::zeros(q);
    for (k, &i) in active.iter().enumerate() {
        mu[i] = mu_act[k].max(0.0);
    }
    if let Some((gm, gv)) = ineq {
        let slack = gm * &x - gv;
        let viol = slack.iter().cloned().fold(0.0f64, f64::max);
        if viol > 1e-7 * (1.0 + gv.amax()) {
            return Err(SolverError::NonConvergence {
                max_iters: 50_000,
                residual: viol,
            });
        }
    }
    Ok(QpSolution {
        x,
        eq_multipliers: nu,
        ineq_multipliers: mu,
        active,
        iterations: 50_000,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unconstrained_minimum() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let c = DVector::from_row_slice(&[-2.0, -8.0]);
        let sol = solve_qp(&h, &c, None, None).unwrap();
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(sol.x[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn box_projection_as_qp() {
        // Project (2, 0.5) onto [-1,1]^2.
        let h = DMatrix::identity(2, 2);
        let c = DVector::from_row_slice(&[-2.0, -0.5]);
        let g = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let gv = DVector::from_element(4, 1.0);
        let sol = solve_qp(&h, &c, None, Some((&g, &gv))).unwrap();
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(sol.x[1], 0.5, epsilon = 1e-12);
        assert_eq!(sol.active, vec![0]);
        assert!(sol.ineq_multipliers[0] > 0.9);
    }

    #[test]
    fn equality_and_inequality() {
        // min ½‖x‖² s.t. x₁ + x₂ = 1, x₂ ≤ 0.2  →  x = (0.8, 0.2).
        let h = DMatrix::identity(2, 2);
        let c = DVector::zeros(2);
        let em = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let ev = DVector::from_row_slice(&[1.0]);
        let gm = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let gv = DVector::from_row_slice(&[0.2]);
        let sol = solve_qp(&h, &c, Some((&em, &ev)), Some((&gm, &gv))).unwrap();
        assert_relative_eq!(sol.x[0], 0.8, epsilon = 1e-12);
        assert_relative_eq!(sol.x[1], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn redundant_active_rows_are_dropped() {
        // Duplicate inequality rows must not break the KKT solve.
        let h = DMatrix::identity(2, 2);
        let c = DVector::from_row_slice(&[-3.0, 0.0]);
        let gm = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let gv = DVector::from_row_slice(&[1.0, 1.0]);
        let sol = solve_qp(&h, &c, None, Some((&gm, &gv))).unwrap();
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn infeasible_equalities_error() {
        let h = DMatrix::identity(1, 1);
        let c = DVector::zeros(1);
        let em = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let ev = DVector::from_row_slice(&[0.0, 1.0]);
        assert!(solve_qp(&h, &c, Some((&em, &ev)), None).is_err());
    }
}
