//! Catalog of second subderivatives `Q_j^{x,g}` and their reduced critical
//! cones.
//!
//! Each constructor validates that `g` lies in the (possibly nonconvex)
//! normal structure of `j` at `x` and returns the cone together with a
//! symmetric matrix `Q̂` representing `Q(z) = z'Q̂z` on the cone (`+∞`
//! outside). Positive homogeneity of degree two and `Q(0) = 0` hold by
//! construction.

use nalgebra::{DMatrix, DVector};

use crate::cone::ConeSpec;
use crate::error::ConeError;
use crate::nonsmooth::Nonsmooth;
use crate::qp::solve_qp;
use crate::TAU_ACT;

/// A second subderivative: reduced critical cone plus quadratic form.
#[derive(Debug, Clone)]
pub struct QuadraticSubderivative {
    pub cone: ConeSpec,
    /// Symmetric matrix of the quadratic form on the cone.
    pub matrix: DMatrix<f64>,
    pub base_point: DVector<f64>,
    pub slope: DVector<f64>,
}

impl QuadraticSubderivative {
    /// `Q(z)`: the quadratic form on the cone, `+∞` outside.
    pub fn quad(&self, z: &DVector<f64>) -> f64 {
        if self.cone.contains(z, TAU_ACT) {
            self.quad_on_cone(z)
        } else {
            f64::INFINITY
        }
    }

    /// The quadratic form without the membership test.
    pub fn quad_on_cone(&self, z: &DVector<f64>) -> f64 {
        (z.transpose() * &self.matrix * z)[0]
    }

    /// Bilinear form `Q̂[z₁, z₂]` associated with the quadratic.
    pub fn bilinear(&self, z1: &DVector<f64>, z2: &DVector<f64>) -> f64 {
        (z1.transpose() * &self.matrix * z2)[0]
    }
}

/// Indicator of a box: tangent cone intersected with `g⊥`, zero curvature.
pub fn q_box(
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    x: &DVector<f64>,
    g: &DVector<f64>,
) -> Result<QuadraticSubderivative, ConeError> {
    let n = x.len();
    let scale = 1.0 + g.amax();
    let mut eq_rows: Vec<DVector<f64>> = Vec::new();
    let mut ineq_rows: Vec<DVector<f64>> = Vec::new();
    for i in 0..n {
        let at_lower = x[i] - lower[i] <= TAU_ACT;
        let at_upper = upper[i] - x[i] <= TAU_ACT;
        if x[i] < lower[i] - TAU_ACT || x[i] > upper[i] + TAU_ACT {
            return Err(ConeError::NotFeasible((x[i] - upper[i]).max(lower[i] - x[i])));
        }
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        if at_upper && !at_lower {
            if g[i] < -TAU_ACT * scale {
                return Err(ConeError::NotNormal { defect: -g[i] });
            }
            if g[i] > TAU_ACT * scale {
                eq_rows.push(e);
            } else {
                ineq_rows.push(e);
            }
        } else if at_lower && !at_upper {
            if g[i] > TAU_ACT * scale {
                return Err(ConeError::NotNormal { defect: g[i] });
            }
            if g[i] < -TAU_ACT * scale {
                eq_rows.push(e);
            } else {
                ineq_rows.push(-e);
            }
        } else if at_lower && at_upper {
            // Degenerate interval: the coordinate is pinned.
            eq_rows.push(e);
        } else if g[i].abs() > TAU_ACT * scale {
            return Err(ConeError::NotNormal { defect: g[i].abs() });
        }
    }
    Ok(QuadraticSubderivative {
        cone: rows_to_cone(n, ineq_rows, eq_rows),
        matrix: DMatrix::zeros(n, n),
        base_point: x.clone(),
        slope: g.clone(),
    })
}

/// Indicator of the polyhedron `{x : N x ≤ b}`: cone `T_K(x) ∩ g⊥`,
/// zero curvature. `g` must be a nonnegative combination of active normals.
pub fn q_polyhedric(
    normals: &DMatrix<f64>,
    offsets: &DVector<f64>,
    x: &DVector<f64>,
    g: &DVector<f64>,
) -> Result<QuadraticSubderivative, ConeError> {
    let n = x.len();
    let slack = normals * x - offsets;
    let scale = 1.0 + offsets.amax();
    if slack.iter().any(|&v| v > TAU_ACT * scale) {
        return Err(ConeError::NotFeasible(slack.amax()));
    }
    let active: Vec<usize> = (0..normals.nrows())
        .filter(|&r| slack[r].abs() <= TAU_ACT * scale)
        .collect();

    // Normal-cone test: g = Σ νᵣ nᵣ with νᵣ ≥ 0 over the active rows,
    // solved as a nonnegative least-squares problem.
    let gscale = 1.0 + g.norm();
    let nu = if g.norm() <= TAU_ACT {
        DVector::zeros(active.len())
    } else if active.is_empty() {
        return Err(ConeError::NotNormal { defect: g.norm() });
    } else {
        let k = active.len();
        let mut at = DMatrix::zeros(n, k);
        for (c, &r) in active.iter().enumerate() {
            at.column_mut(c).copy_from(&normals.row(r).transpose());
        }
        let h = at.transpose() * &at + DMatrix::identity(k, k) * 1e-12;
        let c = -(at.transpose() * g);
        let neg = -DMatrix::identity(k, k);
        let zero = DVector::zeros(k);
        let sol = solve_qp(&h, &c, None, Some((&neg, &zero)))
            .map_err(|_| ConeError::NotNormal { defect: f64::NAN })?;
        let defect = (&at * &sol.x - g).norm();
        if defect > 1e-7 * gscale {
            return Err(ConeError::NotNormal { defect });
        }
        sol.x
    };

    // Tangent rows; rows with a strictly positive coefficient in the
    // normal-cone decomposition are forced to equality by g ⊥ z.
    let mut eq_rows = Vec::new();
    let mut ineq_rows = Vec::new();
    for (k, &r) in active.iter().enumerate() {
        let row = normals.row(r).transpose();
        if nu[k] > 1e-7 * gscale {
            eq_rows.push(row);
        } else {
            ineq_rows.push(row);
        }
    }
    if g.norm() > TAU_ACT {
        eq_rows.push(g.normalize());
    }
    Ok(QuadraticSubderivative {
        cone: rows_to_cone(n, ineq_rows, eq_rows),
        matrix: DMatrix::zeros(n, n),
        base_point: x.clone(),
        slope: g.clone(),
    })
}

/// Weighted 1-norm `j = Σ wᵢ|xᵢ|`: piecewise-linear, zero curvature on the
/// cone of sign-consistent directions.
pub fn q_one_norm(
    weights: &DVector<f64>,
    x: &DVector<f64>,
    g: &DVector<f64>,
) -> Result<QuadraticSubderivative, ConeError> {
    let n = x.len();
    let mut eq_rows = Vec::new();
    let mut ineq_rows = Vec::new();
    for i in 0..n {
        let w = weights[i];
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        if x[i].abs() > TAU_ACT {
            let want = w * x[i].signum();
            if (g[i] - want).abs() > TAU_ACT * (1.0 + w) {
                return Err(ConeError::NotNormal {
                    defect: (g[i] - want).abs(),
                });
            }
        } else if g[i].abs() > w + TAU_ACT {
            return Err(ConeError::NotNormal {
                defect: g[i].abs() - w,
            });
        } else if w - g[i].abs() > TAU_ACT {
            eq_rows.push(e);
        } else {
            // |gᵢ| = wᵢ: directions must not decrease the active sign.
            ineq_rows.push(-e * g[i].signum());
        }
    }
    Ok(QuadraticSubderivative {
        cone: rows_to_cone(n, ineq_rows, eq_rows),
        matrix: DMatrix::zeros(n, n),
        base_point: x.clone(),
        slope: g.clone(),
    })
}

/// Indicator of `K = {‖x‖ ≥ R}`: negative curvature `−(‖g‖/R)‖z‖²` on the
/// tangent hyperplane when the slope points into the ball.
pub fn q_ball_complement(
    radius: f64,
    x: &DVector<f64>,
    g: &DVector<f64>,
) -> Result<QuadraticSubderivative, ConeError> {
    let n = x.len();
    let norm = x.norm();
    if norm < radius - TAU_ACT {
        return Err(ConeError::NotFeasible(radius - norm));
    }
    let gscale = 1.0 + g.norm();
    if norm > radius + TAU_ACT {
        // Interior point: only g = 0 is a proximal normal.
        if g.norm() > TAU_ACT * gscale {
            return Err(ConeError::NotNormal { defect: g.norm() });
        }
        return Ok(QuadraticSubderivative {
            cone: ConeSpec::full(n),
            matrix: DMatrix::zeros(n, n),
            base_point: x.clone(),
            slope: g.clone(),
        });
    }
    let unit = x / norm;
    let radial = g.dot(&unit);
    let tangential = (g - &unit * radial).norm();
    if tangential > TAU_ACT * gscale || radial > TAU_ACT * gscale {
        return Err(ConeError::NotNormal {
            defect: tangential.max(radial),
        });
    }
    let alpha = -radial; // ‖g‖ with the inward orientation
    if alpha > TAU_ACT * gscale {
        // Cone = tangent hyperplane; curvature −(α/R) on it.
        let proj_tan = DMatrix::identity(n, n) - &unit * unit.transpose();
        Ok(QuadraticSubderivative {
            cone: ConeSpec::Polyhedral {
                dim: n,
                ineq: DMatrix::zeros(0, n),
                eq: DMatrix::from_rows(&[unit.transpose()]),
            },
            matrix: proj_tan * (-(alpha / radius)),
            base_point: x.clone(),
            slope: g.clone(),
        })
    } else {
        // Zero slope on the boundary: tangent halfspace, zero curvature.
        Ok(QuadraticSubderivative {
            cone: ConeSpec::Polyhedral {
                dim: n,
                ineq: DMatrix::from_rows(&[(-unit).transpose()]),
                eq: DMatrix::zeros(0, n),
            },
            matrix: DMatrix::zeros(n, n),
            base_point: x.clone(),
            slope: g.clone(),
        })
    }
}

/// Indicator of the elastoplastic set `{Σ : |DΣᵢ| ≤ 1}`: recovers the
/// per-cell multiplier `λᵢ = ⟨ξᵢ, D'DΣᵢ⟩ / |D'DΣᵢ|²` on active cells and
/// builds `Q(T) = Σᵢ μᵢ λᵢ |DTᵢ|²` on `T_K(Σ) ∩ Ξ⊥`.
///
/// `xi` is the pointwise value of the normal `Ξ = λ D'DΣ` (cell block `ξᵢ`,
/// without the cell weight).
pub fn q_elastoplastic(
    d: &DMatrix<f64>,
    weights: &DVector<f64>,
    sigma: &DVector<f64>,
    xi: &DVector<f64>,
) -> Result<QuadraticSubderivative, ConeError> {
    let m = d.ncols();
    let cells = weights.len();
    let dim = m * cells;
    let dtd = d.transpose() * d;
    let xiscale = 1.0 + xi.amax();

    let mut lambda = DVector::zeros(cells);
    let mut eq_rows: Vec<DVector<f64>> = Vec::new();
    let mut ineq_rows: Vec<DVector<f64>> = Vec::new();
    let mut matrix = DMatrix::zeros(dim, dim);
    for i in 0..cells {
        let s = sigma.rows(i * m, m).clone_owned();
        let xi_c = xi.rows(i * m, m).clone_owned();
        let dn = (d * &s).norm();
        if dn > 1.0 + TAU_ACT {
            return Err(ConeError::NotFeasible(dn - 1.0));
        }
        if dn >= 1.0 - TAU_ACT {
            let dds = &dtd * &s;
            let denom = dds.norm_squared();
            let li = if denom > 0.0 { xi_c.dot(&dds) / denom } else { 0.0 };
            if li < -TAU_ACT * xiscale {
                return Err(ConeError::NotNormal { defect: -li });
            }
            let parallel_defect = (&xi_c - &dds * li).norm();
            if parallel_defect > 1e-7 * xiscale {
                return Err(ConeError::NotNormal {
                    defect: parallel_defect,
                });
            }
            lambda[i] = li.max(0.0);
            let mut row = DVector::zeros(dim);
            row.rows_mut(i * m, m).copy_from(&dds);
            if lambda[i] > TAU_ACT * xiscale {
                eq_rows.push(row);
                for r in 0..m {
                    for c in 0..m {
                        matrix[(i * m + r, i * m + c)] = weights[i] * lambda[i] * dtd[(r, c)];
                    }
                }
            } else {
                ineq_rows.push(row);
            }
        } else if xi_c.norm() > TAU_ACT * xiscale {
            return Err(ConeError::NotNormal {
                defect: xi_c.norm(),
            });
        }
    }

    // Purely equality-constrained cones are reported as weighted subspaces,
    // with the per-cell multipliers as the finiteness weights.
    let cone = if ineq_rows.is_empty() {
        let mut eqm = DMatrix::zeros(eq_rows.len(), dim);
        for (k, r) in eq_rows.iter().enumerate() {
            eqm.row_mut(k).copy_from(&r.transpose());
        }
        ConeSpec::WeightedSubspace {
            basis: crate::solver::null_space(&eqm),
            weights: lambda.clone(),
        }
    } else {
        rows_to_cone(dim, ineq_rows, eq_rows)
    };
    Ok(QuadraticSubderivative {
        cone,
        matrix,
        base_point: sigma.clone(),
        slope: xi.clone(),
    })
}

/// Shift `Q_{δK}^{x̄, p₀−x̄}` to the subderivative of
/// `j = ½‖·‖² + δ_K` at `x̄` for `p₀`: same cone, `Q'(z) = ‖z‖² + Q(z)`.
pub fn q_prox_regular_shift(q_delta: &QuadraticSubderivative) -> QuadraticSubderivative {
    let n = q_delta.matrix.nrows();
    QuadraticSubderivative {
        cone: q_delta.cone.clone(),
        matrix: &q_delta.matrix + DMatrix::identity(n, n),
        base_point: q_delta.base_point.clone(),
        slope: &q_delta.base_point + &q_delta.slope,
    }
}

/// Catalog dispatch for the built-in functional kinds.
pub fn catalog_subderivative(
    nonsmooth: &Nonsmooth,
    x: &DVector<f64>,
    g: &DVector<f64>,
) -> Result<QuadraticSubderivative, ConeError> {
    match nonsmooth {
        Nonsmooth::IndicatorBox { lower, upper } => q_box(lower, upper, x, g),
        Nonsmooth::IndicatorPolyhedron {
            normals, offsets, ..
        } => q_polyhedric(normals, offsets, x, g),
        Nonsmooth::OneNormScaled { weights } => q_one_norm(weights, x, g),
        Nonsmooth::IndicatorBallComplement { radius } => q_ball_complement(*radius, x, g),
        Nonsmooth::IndicatorPointwiseBall { d, cells } => {
            q_elastoplastic(d, &DVector::from_element(*cells, 1.0), x, g)
        }
        Nonsmooth::Custom(_) => Err(ConeError::Unsupported),
    }
}

fn rows_to_cone(dim: usize, ineq: Vec<DVector<f64>>, eq: Vec<DVector<f64>>) -> ConeSpec {
    let mut im = DMatrix::zeros(ineq.len(), dim);
    for (k, r) in ineq.iter().enumerate() {
        im.row_mut(k).copy_from(&r.transpose());
    }
    let mut em = DMatrix::zeros(eq.len(), dim);
    for (k, r) in eq.iter().enumerate() {
        em.row_mut(k).copy_from(&r.transpose());
    }
    ConeSpec::Polyhedral {
        dim,
        ineq: im,
        eq: em,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn box_face_cone() {
        // K = [−1,1]², x = (1, 0.5), g = (2, 0): cone = {0} × ℝ, Q ≡ 0.
        let lower = DVector::from_element(2, -1.0);
        let upper = DVector::from_element(2, 1.0);
        let x = DVector::from_row_slice(&[1.0, 0.5]);
        let g = DVector::from_row_slice(&[2.0, 0.0]);
        let q = q_box(&lower, &upper, &x, &g).unwrap();
        assert!(q.cone.contains(&DVector::from_row_slice(&[0.0, 3.0]), 1e-12));
        assert!(!q.cone.contains(&DVector::from_row_slice(&[0.1, 0.0]), 1e-12));
        assert!(!q.cone.contains(&DVector::from_row_slice(&[-0.1, 0.0]), 1e-12));
        assert_relative_eq!(q.quad(&DVector::from_row_slice(&[0.0, 3.0])), 0.0);
    }

    #[test]
    fn box_interior_cone_is_everything() {
        let lower = DVector::from_element(2, -1.0);
        let upper = DVector::from_element(2, 1.0);
        let q = q_box(&lower, &upper, &DVector::zeros(2), &DVector::zeros(2)).unwrap();
        assert!(q.cone.contains(&DVector::from_row_slice(&[5.0, -7.0]), 1e-12));
        assert_relative_eq!(q.quad(&DVector::from_row_slice(&[5.0, -7.0])), 0.0);
    }

    #[test]
    fn simplex_vertex_not_normal() {
        // Simplex {z ≥ 0, Σz = 1} as {−z ≤ 0, Σz ≤ 1, −Σz ≤ −1};
        // at the vertex e₁ the slope (−1, 0, 0) fails ⟨g, z − x⟩ ≤ 0.
        let normals = DMatrix::from_row_slice(
            5,
            3,
            &[
                -1.0, 0.0, 0.0, //
                0.0, -1.0, 0.0, //
                0.0, 0.0, -1.0, //
                1.0, 1.0, 1.0, //
                -1.0, -1.0, -1.0,
            ],
        );
        let offsets = DVector::from_row_slice(&[0.0, 0.0, 0.0, 1.0, -1.0]);
        let x = DVector::from_row_slice(&[1.0, 0.0, 0.0]);
        let g = DVector::from_row_slice(&[-1.0, 0.0, 0.0]);
        // Independent check: some vertex violates the normal inequality.
        let verts = [
            DVector::from_row_slice(&[1.0, 0.0, 0.0]),
            DVector::from_row_slice(&[0.0, 1.0, 0.0]),
            DVector::from_row_slice(&[0.0, 0.0, 1.0]),
        ];
        assert!(verts.iter().any(|v| g.dot(&(v - &x)) > 1e-9));
        assert!(matches!(
            q_polyhedric(&normals, &offsets, &x, &g),
            Err(ConeError::NotNormal { .. })
        ));
    }

    #[test]
    fn elastoplastic_lambda_recovery() {
        // One cell, m = n = 1, D = 1, Σ = 1, Ξ = 0.3 → λ = 0.3, Q(T) = 0.3 T².
        let d = DMatrix::from_element(1, 1, 1.0);
        let w = DVector::from_element(1, 1.0);
        let q = q_elastoplastic(
            &d,
            &w,
            &DVector::from_row_slice(&[1.0]),
            &DVector::from_row_slice(&[0.3]),
        )
        .unwrap();
        let t = DVector::from_row_slice(&[2.0]);
        assert_relative_eq!(q.quad_on_cone(&t), 0.3 * 4.0, epsilon = 1e-12);
    }

    #[test]
    fn elastoplastic_inactive_cell() {
        let d = DMatrix::from_element(1, 1, 1.0);
        let w = DVector::from_element(1, 1.0);
        let q = q_elastoplastic(
            &d,
            &w,
            &DVector::from_row_slice(&[0.5]),
            &DVector::from_row_slice(&[0.0]),
        )
        .unwrap();
        assert!(q.cone.contains(&DVector::from_row_slice(&[-4.0]), 1e-12));
        assert_relative_eq!(q.quad(&DVector::from_row_slice(&[-4.0])), 0.0);
    }

    #[test]
    fn prox_regular_shift_formula() {
        // quad(z) = 0.3 z² shifted at z = 2: 4 + 1.2 = 5.2.
        let q0 = QuadraticSubderivative {
            cone: ConeSpec::full(1),
            matrix: DMatrix::from_element(1, 1, 0.3),
            base_point: DVector::zeros(1),
            slope: DVector::zeros(1),
        };
        let q = q_prox_regular_shift(&q0);
        assert_relative_eq!(q.quad(&DVector::from_row_slice(&[2.0])), 5.2);
        assert_relative_eq!(q.quad(&DVector::zeros(1)), 0.0);
    }
}
