//! Elliptic VI solver: projected fixed point `x ← prox_{σj}(x − σ A(p,x))`
//! with `σ = c/L²`, plus an active-face Newton polish that finishes off
//! piecewise-smooth kinds (boxes, polyhedra, 1-norm) at machine precision.

use nalgebra::{DMatrix, DVector};

use crate::error::SolverError;
use crate::nonsmooth::Nonsmooth;
use crate::problem::{ViProblem, ViSolution};
use crate::{DEFAULT_MAX_ITERS, TAU_ACT};

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub polish: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: crate::DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            polish: true,
        }
    }
}

/// Solve the VI at parameter `p` starting from `x0`, to natural-map residual
/// `tol`. Requires `monotonicity_constant > 0` and an exact prox for `j`.
pub fn solve_elliptic_vi(
    problem: &ViProblem,
    p: &DVector<f64>,
    x0: &DVector<f64>,
    tol: f64,
) -> Result<ViSolution, SolverError> {
    solve_elliptic_vi_with(
        problem,
        p,
        x0,
        &SolveOptions {
            tol,
            ..SolveOptions::default()
        },
    )
}

pub fn solve_elliptic_vi_with(
    problem: &ViProblem,
    p: &DVector<f64>,
    x0: &DVector<f64>,
    opts: &SolveOptions,
) -> Result<ViSolution, SolverError> {
    let c = problem.monotonicity_constant;
    if !(c > 0.0) {
        return Err(SolverError::InvalidStep(c));
    }
    let l = problem.lipschitz_estimate(p, x0);
    let sigma = c / (l * l);
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(SolverError::InvalidStep(sigma));
    }

    let mut x = x0.clone();
    let mut best = f64::INFINITY;
    for k in 0..opts.max_iters {
        let a = problem.operator.eval(p, &x);
        let w = &x - &a * sigma;
        let xn = problem.nonsmooth.prox(&w, sigma)?;
        let defect = (&x - &xn).norm();
        best = best.min(defect);
        if defect <= opts.tol {
            return Ok(ViSolution {
                x_bar: x,
                residual: defect,
                iterations: k,
            multipliers: None,
            });
        }
        if opts.polish && (k % 25 == 0) && defect < 1e-2 * (1.0 + x.norm()) {
            if let Some(cand) = try_polish(problem, p, &xn, sigma, opts.tol) {
                let r = problem.natural_residual(p, &cand, sigma);
                if r <= opts.tol {
                    return Ok(ViSolution {
                        x_bar: cand,
                        residual: r,
                        iterations: k + 1,
                        multipliers: None,
                    });
                }
            }
        }
        x = xn;
    }
    Err(SolverError::NonConvergence {
        max_iters: opts.max_iters,
        residual: best,
    })
}

/// Affine description of the active face at `x`: points `origin + basis·w`,
/// on which stationarity reads `basisᵀ A(p, x) + rhs = 0`.
struct FaceData {
    origin: DVector<f64>,
    basis: DMatrix<f64>,
    rhs: DVector<f64>,
}

fn face_at(nonsmooth: &Nonsmooth, x: &DVector<f64>, tol_act: f64) -> Option<FaceData> {
    let n = x.len();
    match nonsmooth {
        Nonsmooth::IndicatorBox { lower, upper } => {
            let mut origin = x.clone();
            let mut free = Vec::new();
            for i in 0..n {
                if x[i] - lower[i] <= tol_act {
                    origin[i] = lower[i];
                } else if upper[i] - x[i] <= tol_act {
                    origin[i] = upper[i];
                } else {
                    free.push(i);
                }
            }
            let mut basis = DMatrix::zeros(n, free.len());
            for (k, &i) in free.iter().enumerate() {
                basis[(i, k)] = 1.0;
            }
            Some(FaceData {
                origin,
                basis,
                rhs: DVector::zeros(free.len()),
            })
        }
        Nonsmooth::IndicatorPolyhedron {
            normals, offsets, ..
        } => {
            let s = normals * x - offsets;
            let scale = 1.0 + offsets.amax();
            let active: Vec<usize> = (0..normals.nrows())
                .filter(|&r| s[r].abs() <= tol_act * scale)
                .collect();
            if active.is_empty() {
                return Some(FaceData {
                    origin: x.clone(),
                    basis: DMatrix::identity(n, n),
                    rhs: DVector::zeros(n),
                });
            }
            let mut na = DMatrix::zeros(active.len(), n);
            let mut ba = DVector::zeros(active.len());
            for (k, &r) in active.iter().enumerate() {
                na.row_mut(k).copy_from(&normals.row(r));
                ba[k] = offsets[r];
            }
            // Land exactly on the face, then move within its null space.
            let pinv = na.clone().pseudo_inverse(1e-12).ok()?;
            let origin = x - &pinv * (&na * x - &ba);
            let basis = null_space(&na);
            let k = basis.ncols();
            Some(FaceData {
                origin,
                basis,
                rhs: DVector::zeros(k),
            })
        }
        Nonsmooth::OneNormScaled { weights } => {
            let mut origin = DVector::zeros(n);
            let mut free = Vec::new();
            for i in 0..n {
                if x[i].abs() > tol_act {
                    origin[i] = 0.0;
                    free.push(i);
                }
            }
            let mut basis = DMatrix::zeros(n, free.len());
            let mut rhs = DVector::zeros(free.len());
            for (k, &i) in free.iter().enumerate() {
                basis[(i, k)] = 1.0;
                rhs[k] = weights[i] * x[i].signum();
            }
            Some(FaceData { origin, basis, rhs })
        }
        _ => None,
    }
}

/// Newton on the face equations; returns a candidate solution or `None`.
fn try_polish(
    problem: &ViProblem,
    p: &DVector<f64>,
    x: &DVector<f64>,
    sigma: f64,
    tol: f64,
) -> Option<DVector<f64>> {
    let tol_act = (10.0 * tol).max(TAU_ACT) * (1.0 + x.amax());
    let face = face_at(&problem.nonsmooth, x, tol_act)?;
    let k = face.basis.ncols();
    if k == 0 {
        return Some(face.origin);
    }
    let mut w = face.basis.transpose() * (x - &face.origin);
    for _ in 0..20 {
        let xc = &face.origin + &face.basis * &w;
        let g = face.basis.transpose() * problem.operator.eval(p, &xc) + &face.rhs;
        if g.norm() <= 1e-14 * (1.0 + w.norm()) {
            break;
        }
        let jac = face.basis.transpose() * problem.operator.jac_x(p, &xc) * &face.basis;
        let step = jac.full_piv_lu().solve(&g)?;
        let step_norm = step.norm();
        w -= step;
        if step_norm < 1e-15 * (1.0 + w.norm()) {
            break;
        }
    }
    let cand = &face.origin + &face.basis * w;
    let _ = sigma;
    Some(cand)
}

/// Orthonormal basis of the null space of `m` (columns).
pub fn null_space(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.ncols();
    if m.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let tol = 1e-12 * (1.0 + smax);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let mut basis = DMatrix::zeros(n, n - rank);
    for k in rank..vt.nrows().min(n) {
        basis.column_mut(k - rank).copy_from(&vt.row(k).transpose());
    }
    // vt has min(nrows, ncols) rows; append missing coordinate directions if
    // the SVD is wide (more columns than rows).
    if vt.nrows() < n {
        let q = complete_basis(&vt.transpose(), n);
        for (k, col) in q.column_iter().enumerate() {
            basis.column_mut(n - rank - q.ncols() + k).copy_from(&col);
        }
    }
    basis
}

fn complete_basis(have: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let mut cols: Vec<DVector<f64>> = have.column_iter().map(|c| c.clone_owned()).collect();
    let mut extra = Vec::new();
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        for c in &cols {
            let pr = e.dot(c);
            e -= c * pr;
        }
        if e.norm() > 1e-10 {
            let e = e.normalize();
            cols.push(e.clone());
            extra.push(e);
        }
    }
    let mut out = DMatrix::zeros(n, extra.len());
    for (k, c) in extra.iter().enumerate() {
        out.column_mut(k).copy_from(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::AffineOperator;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn box_problem(dim: usize) -> ViProblem {
        ViProblem {
            dim_x: dim,
            dim_p: dim,
            operator: Arc::new(AffineOperator::projection(dim)),
            nonsmooth: Nonsmooth::IndicatorBox {
                lower: DVector::from_element(dim, -1.0),
                upper: DVector::from_element(dim, 1.0),
            },
            monotonicity_constant: 1.0,
        }
    }

    #[test]
    fn box_projection_solution() {
        let prob = box_problem(2);
        let p = DVector::from_row_slice(&[2.0, 0.5]);
        let sol = solve_elliptic_vi(&prob, &p, &DVector::zeros(2), 1e-10).unwrap();
        assert_relative_eq!(sol.x_bar[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.x_bar[1], 0.5, epsilon = 1e-9);
        assert!(sol.residual <= 1e-10);
    }

    #[test]
    fn soft_threshold_solution() {
        let prob = ViProblem {
            dim_x: 1,
            dim_p: 1,
            operator: Arc::new(AffineOperator::projection(1)),
            nonsmooth: Nonsmooth::OneNormScaled {
                weights: DVector::from_element(1, 1.0),
            },
            monotonicity_constant: 1.0,
        };
        let sol = solve_elliptic_vi(
            &prob,
            &DVector::from_row_slice(&[0.5]),
            &DVector::zeros(1),
            1e-10,
        )
        .unwrap();
        assert_relative_eq!(sol.x_bar[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn invalid_step_without_monotonicity() {
        let mut prob = box_problem(2);
        prob.monotonicity_constant = 0.0;
        let err = solve_elliptic_vi(&prob, &DVector::zeros(2), &DVector::zeros(2), 1e-10);
        assert!(matches!(err, Err(SolverError::InvalidStep(_))));
    }

    #[test]
    fn null_space_of_row() {
        let m = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let ns = null_space(&m);
        assert_eq!(ns.ncols(), 2);
        for c in ns.column_iter() {
            assert!(c[0].abs() < 1e-12);
            assert_relative_eq!(c.norm(), 1.0, epsilon = 1e-12);
        }
    }
}
