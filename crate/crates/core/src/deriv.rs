//! Solver for the derivative VI
//!
//! ```text
//!     y ∈ K:  ⟨A_p q + A_x y, z − y⟩ + ½Q(z) − ½Q(y) ≥ 0   ∀z ∈ K,
//! ```
//!
//! where `K` is the reduced critical cone and `Q` the second subderivative.
//! Subspace cones reduce to a linear solve; polyhedral cones with symmetric
//! `A_x` to a single QP. Nonsymmetric operators are handled by repeatedly
//! solving the symmetric subproblem with the skew part lagged — the
//! fixed-point construction of the elliptic existence proof, contracting
//! whenever the skew norm stays below the coercivity constant — with a
//! forward-backward fallback otherwise, and an active-face polish at the end.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cone::ConeSpec;
use crate::error::SolverError;
use crate::problem::spectral_norm;
use crate::qp::solve_qp;
use crate::subderiv::QuadraticSubderivative;
use crate::TAU_ACT;

/// Solution of the derivative VI together with its first-order diagnostics.
#[derive(Debug, Clone)]
pub struct DerivativeSolution {
    pub q: DVector<f64>,
    pub y: DVector<f64>,
    /// `Q(y)`.
    pub q_value: f64,
    /// Natural-map defect of `y` for the derivative VI.
    pub vi_residual: f64,
    /// `|Q(y) + ⟨A_p q + A_x y, y⟩|` — the value identity satisfied by
    /// every limit point of the difference quotients.
    pub value_identity_gap: f64,
}

/// Report of [`check_necessary_conditions`].
#[derive(Debug, Clone)]
pub struct NecessaryReport {
    /// Smallest value of `⟨A_p q + A_x y, z−y⟩ + ½Q(z) − ½Q(y)` over the
    /// sampled cone points (≥ −tol for a valid solution).
    pub min_inequality_margin: f64,
    pub value_identity_gap: f64,
    pub samples: usize,
}

pub fn solve_derivative_vi(
    ap: &DMatrix<f64>,
    ax: &DMatrix<f64>,
    q_sub: &QuadraticSubderivative,
    q: &DVector<f64>,
    tol: f64,
) -> Result<DerivativeSolution, SolverError> {
    let n = ax.nrows();
    if q_sub.cone.dim() != n || ap.nrows() != n {
        return Err(SolverError::Dimension("derivative VI blocks".into()));
    }
    let b = ap * q;

    // Coercivity of A_x + Q̂ on the span of the cone.
    let span = q_sub.cone.span_basis();
    if span.ncols() > 0 {
        let sym = (ax + ax.transpose()) * 0.5 + &q_sub.matrix;
        let reduced = span.transpose() * sym * &span;
        let eig = reduced.symmetric_eigen();
        let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_eig <= 0.0 {
            return Err(SolverError::NotCoercive(min_eig));
        }
    }

    let y = match &q_sub.cone {
        ConeSpec::Subspace { basis } | ConeSpec::WeightedSubspace { basis, .. } => {
            subspace_solve(basis, ax, &q_sub.matrix, &b)?
        }
        ConeSpec::Atoms { locations } => {
            let basis = DMatrix::identity(locations.len(), locations.len());
            subspace_solve(&basis, ax, &q_sub.matrix, &b)?
        }
        ConeSpec::Polyhedral { dim, ineq, eq } => {
            polyhedral_solve(*dim, ineq, eq, ax, &q_sub.matrix, &b, tol)?
        }
    };

    let q_value = q_sub.quad_on_cone(&y);
    let vi_residual = natural_residual(ax, q_sub, &b, &y);
    let value_identity_gap = (q_value + (&b + ax * &y).dot(&y)).abs();
    Ok(DerivativeSolution {
        q: q.clone(),
        y,
        q_value,
        vi_residual,
        value_identity_gap,
    })
}

/// On a subspace the VI is the linear equation `Z'(A_x + Q̂)Z w = −Z'b`.
fn subspace_solve(
    basis: &DMatrix<f64>,
    ax: &DMatrix<f64>,
    qm: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>, SolverError> {
    if basis.ncols() == 0 {
        return Ok(DVector::zeros(basis.nrows()));
    }
    let mat = basis.transpose() * (ax + qm) * basis;
    let rhs = -(basis.transpose() * b);
    let w = mat
        .full_piv_lu()
        .solve(&rhs)
        .ok_or(SolverError::NotCoercive(0.0))?;
    Ok(basis * w)
}

fn polyhedral_solve(
    dim: usize,
    ineq: &DMatrix<f64>,
    eq: &DMatrix<f64>,
    ax: &DMatrix<f64>,
    qm: &DMatrix<f64>,
    b: &DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>, SolverError> {
    let sym = (ax + ax.transpose()) * 0.5;
    let skew = ax - &sym;
    let skew_norm = spectral_norm(&skew);
    let h = &sym + qm;
    let zero_i = DVector::zeros(ineq.nrows());
    let zero_e = DVector::zeros(eq.nrows());
    let in_arg = (ineq.nrows() > 0).then_some((ineq, &zero_i));
    let eq_arg = (eq.nrows() > 0).then_some((eq, &zero_e));

    let qp_once = |c: &DVector<f64>| -> Result<DVector<f64>, SolverError> {
        Ok(solve_qp(&h, c, eq_arg, in_arg)?.x)
    };

    let mut y = if skew_norm <= 1e-12 {
        qp_once(b)?
    } else {
        // Coercivity constant on the span for the contraction estimate.
        let span = crate::solver::null_space(eq);
        let red = span.transpose() * &h * &span;
        let c_est = red
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
            .max(1e-14);
        let kappa = skew_norm / c_est;
        let mut y = DVector::zeros(dim);
        if kappa <= 0.9 {
            // Lagged-skew contraction with factor κ.
            let iters = ((tol.ln() - 1.0) / kappa.ln()).ceil().max(4.0) as usize;
            for _ in 0..iters.min(4000) {
                let c = b + &skew * &y;
                let y_next = qp_once(&c)?;
                let step = (&y_next - &y).norm();
                y = y_next;
                if step * kappa / (1.0 - kappa) <= 0.1 * tol {
                    break;
                }
            }
        } else {
            // Forward-backward splitting on F(y) = b + (A_x + Q̂) y.
            let l = spectral_norm(&(ax + qm));
            let sigma = c_est / (l * l);
            let eye = DMatrix::identity(dim, dim);
            let hp = &eye + qm * sigma;
            for _ in 0..200_000 {
                let f = b + ax * &y + qm * &y;
                let v = &y - &f * sigma;
                let c = -v;
                let y_next = solve_qp(&hp, &c, eq_arg, in_arg)?.x;
                let step = (&y_next - &y).norm();
                y = y_next;
                if step <= 0.01 * tol {
                    break;
                }
            }
        }
        y
    };

    // Active-face polish: solve the full nonsymmetric equation on the face
    // identified by the iterate, then verify.
    let scale = 1.0 + y.norm();
    let mut rows: Vec<DVector<f64>> = (0..eq.nrows()).map(|r| eq.row(r).transpose()).collect();
    for r in 0..ineq.nrows() {
        if (ineq.row(r) * &y)[0].abs() <= (1e3 * tol).max(TAU_ACT) * scale {
            rows.push(ineq.row(r).transpose());
        }
    }
    let mut face = DMatrix::zeros(rows.len(), dim);
    for (k, r) in rows.iter().enumerate() {
        face.row_mut(k).copy_from(&r.transpose());
    }
    let z = crate::solver::null_space(&face);
    if z.ncols() > 0 || !rows.is_empty() {
        if let Some(w) = (z.transpose() * (ax + qm) * &z)
            .full_piv_lu()
            .solve(&-(z.transpose() * b))
        {
            let cand = &z * w;
            let cone = ConeSpec::Polyhedral {
                dim,
                ineq: ineq.clone(),
                eq: eq.clone(),
            };
            if cone.contains(&cand, TAU_ACT) {
                let q_sub_stub = QuadraticSubderivative {
                    cone,
                    matrix: qm.clone(),
                    base_point: DVector::zeros(dim),
                    slope: DVector::zeros(dim),
                };
                if natural_residual(ax, &q_sub_stub, b, &cand) <= tol {
                    y = cand;
                }
            }
        }
    }
    Ok(y)
}

/// Natural-map defect for the derivative VI: with
/// `F(y) = A_p q + A_x y` and `g = ½Q + δ_K`, the defect is
/// `‖y − prox_{σg}(y − σ F(y))‖` at `σ = 1/(1 + ‖A_x‖ + ‖Q̂‖)`.
pub fn natural_residual(
    ax: &DMatrix<f64>,
    q_sub: &QuadraticSubderivative,
    b: &DVector<f64>,
    y: &DVector<f64>,
) -> f64 {
    let sigma = 1.0 / (1.0 + spectral_norm(ax) + spectral_norm(&q_sub.matrix));
    let v = y - (b + ax * y) * sigma;
    let z = prox_half_quad(q_sub, &v, sigma);
    (y - z).norm()
}

/// `argmin_z ½‖z−v‖² + σ·½ z'Q̂z` over the cone.
fn prox_half_quad(q_sub: &QuadraticSubderivative, v: &DVector<f64>, sigma: f64) -> DVector<f64> {
    let n = v.len();
    let h = DMatrix::identity(n, n) + &q_sub.matrix * sigma;
    match &q_sub.cone {
        ConeSpec::Polyhedral { ineq, eq, .. } => {
            let zero_i = DVector::zeros(ineq.nrows());
            let zero_e = DVector::zeros(eq.nrows());
            let in_arg = (ineq.nrows() > 0).then_some((ineq, &zero_i));
            let eq_arg = (eq.nrows() > 0).then_some((eq, &zero_e));
            match solve_qp(&h, &(-v), eq_arg, in_arg) {
                Ok(s) => s.x,
                Err(_) => DVector::zeros(n),
            }
        }
        ConeSpec::Subspace { basis } | ConeSpec::WeightedSubspace { basis, .. } => {
            let mat = basis.transpose() * &h * basis;
            let rhs = basis.transpose() * v;
            match mat.full_piv_lu().solve(&rhs) {
                Some(w) => basis * w,
                None => DVector::zeros(n),
            }
        }
        ConeSpec::Atoms { .. } => match h.full_piv_lu().solve(v) {
            Some(z) => z,
            None => DVector::zeros(n),
        },
    }
}

/// Verify the linearized-VI inequality on seeded cone samples and report the
/// value-identity gap.
pub fn check_necessary_conditions(
    sol: &DerivativeSolution,
    q_sub: &QuadraticSubderivative,
    ap: &DMatrix<f64>,
    ax: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> NecessaryReport {
    let b = ap * &sol.q;
    let grad = &b + ax * &sol.y;
    let qy = q_sub.quad_on_cone(&sol.y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 + sol.y.norm();
    let mut min_margin = f64::INFINITY;
    for _ in 0..samples {
        let z = q_sub.cone.sample(&mut rng, scale);
        let margin = grad.dot(&(&z - &sol.y)) + 0.5 * q_sub.quad_on_cone(&z) - 0.5 * qy;
        min_margin = min_margin.min(margin);
    }
    NecessaryReport {
        min_inequality_margin: min_margin,
        value_identity_gap: (qy + grad.dot(&sol.y)).abs(),
        samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn box_face_derivative() {
        // Box projection at p₀ = (2, 0.5): cone = {0}×ℝ, Q ≡ 0,
        // A_p = −I, A_x = I, q = (1,1) → y = (0,1).
        let cone = ConeSpec::Polyhedral {
            dim: 2,
            ineq: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            eq: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        };
        let q_sub = QuadraticSubderivative {
            cone,
            matrix: DMatrix::zeros(2, 2),
            base_point: DVector::zeros(2),
            slope: DVector::zeros(2),
        };
        let ap = -DMatrix::identity(2, 2);
        let ax = DMatrix::identity(2, 2);
        let q = DVector::from_row_slice(&[1.0, 1.0]);
        let sol = solve_derivative_vi(&ap, &ax, &q_sub, &q, 1e-10).unwrap();
        assert_relative_eq!(sol.y[0], 0.0, epsilon = 1e-10);
        assert_relative_eq!(sol.y[1], 1.0, epsilon = 1e-10);
        assert!(sol.value_identity_gap <= 1e-10);
    }

    #[test]
    fn zero_direction_zero_derivative() {
        let q_sub = QuadraticSubderivative {
            cone: ConeSpec::full(3),
            matrix: DMatrix::zeros(3, 3),
            base_point: DVector::zeros(3),
            slope: DVector::zeros(3),
        };
        let ap = DMatrix::identity(3, 3);
        let ax = DMatrix::identity(3, 3);
        let sol = solve_derivative_vi(&ap, &ax, &q_sub, &DVector::zeros(3), 1e-12).unwrap();
        assert_relative_eq!(sol.y.norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(sol.q_value, 0.0);
    }

    #[test]
    fn scalar_quadratic_closed_form() {
        // cone = ℝ, Q(z) = 0.3 z², A_x = 1, A_p = 1, q = 1:
        // (1 + y) + 0.3 y = 0 ⇒ y = −1/1.3.
        let q_sub = QuadraticSubderivative {
            cone: ConeSpec::full(1),
            matrix: DMatrix::from_element(1, 1, 0.3),
            base_point: DVector::zeros(1),
            slope: DVector::zeros(1),
        };
        let ap = DMatrix::identity(1, 1);
        let ax = DMatrix::identity(1, 1);
        let sol =
            solve_derivative_vi(&ap, &ax, &q_sub, &DVector::from_row_slice(&[1.0]), 1e-12)
                .unwrap();
        assert_relative_eq!(sol.y[0], -1.0 / 1.3, epsilon = 1e-12);
    }

    #[test]
    fn necessary_conditions_detect_perturbation() {
        let q_sub = QuadraticSubderivative {
            cone: ConeSpec::full(2),
            matrix: DMatrix::zeros(2, 2),
            base_point: DVector::zeros(2),
            slope: DVector::zeros(2),
        };
        let ap = DMatrix::identity(2, 2);
        let ax = DMatrix::identity(2, 2);
        let q = DVector::from_row_slice(&[1.0, -0.5]);
        let sol = solve_derivative_vi(&ap, &ax, &q_sub, &q, 1e-12).unwrap();
        let rep = check_necessary_conditions(&sol, &q_sub, &ap, &ax, 1000, 42);
        assert!(rep.min_inequality_margin >= -1e-8);

        let mut bad = sol.clone();
        bad.y[0] += 0.1;
        bad.q_value = q_sub.quad_on_cone(&bad.y);
        let rep_bad = check_necessary_conditions(&bad, &q_sub, &ap, &ax, 1000, 42);
        assert!(rep_bad.min_inequality_margin < -1e-3);
    }

    #[test]
    fn not_coercive_detected() {
        let q_sub = QuadraticSubderivative {
            cone: ConeSpec::full(1),
            matrix: DMatrix::zeros(1, 1),
            base_point: DVector::zeros(1),
            slope: DVector::zeros(1),
        };
        let ap = DMatrix::identity(1, 1);
        let ax = -DMatrix::identity(1, 1);
        assert!(matches!(
            solve_derivative_vi(&ap, &ax, &q_sub, &DVector::zeros(1), 1e-10),
            Err(SolverError::NotCoercive(_))
        ));
    }
}
