//! Representations of reduced critical cones with exact membership tests and
//! projections.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::qp::solve_qp;
use crate::solver::null_space;
use crate::TAU_ACT;

/// A closed convex cone in `ℝⁿ` (or, for [`ConeSpec::Atoms`], the space of
/// atom-weight vectors of measures supported on fixed points).
#[derive(Debug, Clone)]
pub enum ConeSpec {
    /// `{z : ineq·z ≤ 0 (rowwise), eq·z = 0}`.
    Polyhedral {
        dim: usize,
        ineq: DMatrix<f64>,
        eq: DMatrix<f64>,
    },
    /// Linear subspace spanned by orthonormal `basis` columns.
    Subspace { basis: DMatrix<f64> },
    /// Subspace with per-coordinate weights recording the `L²(λ)`-finiteness
    /// condition of the weighted critical cone. The condition is vacuous in
    /// finite dimensions; the weights are kept for reporting.
    WeightedSubspace {
        basis: DMatrix<f64>,
        weights: DVector<f64>,
    },
    /// Weight space of atomic measures at fixed locations in `(0,1)`;
    /// every weight vector belongs to the cone.
    Atoms { locations: Vec<f64> },
}

impl ConeSpec {
    /// Full cone of `ℝⁿ`.
    pub fn full(dim: usize) -> Self {
        ConeSpec::Polyhedral {
            dim,
            ineq: DMatrix::zeros(0, dim),
            eq: DMatrix::zeros(0, dim),
        }
    }

    /// Ambient dimension of cone members.
    pub fn dim(&self) -> usize {
        match self {
            ConeSpec::Polyhedral { dim, .. } => *dim,
            ConeSpec::Subspace { basis } | ConeSpec::WeightedSubspace { basis, .. } => {
                basis.nrows()
            }
            ConeSpec::Atoms { locations } => locations.len(),
        }
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        let scale = 1.0 + z.norm();
        match self {
            ConeSpec::Polyhedral { ineq, eq, .. } => {
                let si = ineq * z;
                let se = eq * z;
                si.iter().all(|&v| v <= tol * scale) && se.iter().all(|&v| v.abs() <= tol * scale)
            }
            ConeSpec::Subspace { basis } | ConeSpec::WeightedSubspace { basis, .. } => {
                let proj = basis * (basis.transpose() * z);
                (z - proj).norm() <= tol * scale
            }
            ConeSpec::Atoms { .. } => true,
        }
    }

    /// Exact Euclidean projection onto the cone.
    pub fn project(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            ConeSpec::Polyhedral { dim, ineq, eq } => {
                if self.contains(z, 0.0) {
                    return z.clone();
                }
                let h = DMatrix::identity(*dim, *dim);
                let c = -z;
                let zero_i = DVector::zeros(ineq.nrows());
                let zero_e = DVector::zeros(eq.nrows());
                let eq_arg = (eq.nrows() > 0).then_some((eq, &zero_e));
                let in_arg = (ineq.nrows() > 0).then_some((ineq, &zero_i));
                match solve_qp(&h, &c, eq_arg, in_arg) {
                    Ok(sol) => sol.x,
                    Err(_) => DVector::zeros(*dim),
                }
            }
            ConeSpec::Subspace { basis } | ConeSpec::WeightedSubspace { basis, .. } => {
                basis * (basis.transpose() * z)
            }
            ConeSpec::Atoms { .. } => z.clone(),
        }
    }

    /// Orthonormal basis of the linear span of the cone (null space of the
    /// equality rows for polyhedral cones).
    pub fn span_basis(&self) -> DMatrix<f64> {
        match self {
            ConeSpec::Polyhedral { dim, eq, .. } => {
                if eq.nrows() == 0 {
                    DMatrix::identity(*dim, *dim)
                } else {
                    null_space(eq)
                }
            }
            ConeSpec::Subspace { basis } | ConeSpec::WeightedSubspace { basis, .. } => {
                basis.clone()
            }
            ConeSpec::Atoms { locations } => DMatrix::identity(locations.len(), locations.len()),
        }
    }

    /// Seeded cone sample: a Gaussian vector projected onto the cone and
    /// rescaled by a random magnitude.
    pub fn sample(&self, rng: &mut ChaCha8Rng, scale: f64) -> DVector<f64> {
        let n = self.dim();
        let raw = DVector::from_fn(n, |_, _| {
            // Box-Muller keeps the dependency surface small.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            (-2.0 * u1.ln()).sqrt() * u2.cos()
        });
        let proj = self.project(&raw);
        if proj.norm() < 1e-14 {
            return proj;
        }
        let mag: f64 = rng.gen_range(0.05..2.0);
        let norm = proj.norm().max(1e-14);
        proj * (mag * scale / norm)
    }

    /// Membership tolerance used throughout (`TAU_ACT`).
    pub fn contains_default(&self, z: &DVector<f64>) -> bool {
        self.contains(z, TAU_ACT)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn polyhedral_projection_and_membership() {
        // Cone {z : z₁ ≤ 0} ∩ {z₁ = 0} = {0} × ℝ.
        let cone = ConeSpec::Polyhedral {
            dim: 2,
            ineq: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            eq: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        };
        let z = DVector::from_row_slice(&[0.5, 2.0]);
        let p = cone.project(&z);
        assert_relative_eq!(p[0], 0.0, epsilon = 1e-10);
        assert_relative_eq!(p[1], 2.0, epsilon = 1e-10);
        assert!(cone.contains(&p, 1e-9));
        assert!(!cone.contains(&z, 1e-9));
    }

    #[test]
    fn samples_lie_in_cone() {
        let cone = ConeSpec::Polyhedral {
            dim: 3,
            ineq: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, -1.0, 0.0]),
            eq: DMatrix::zeros(0, 3),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let z = cone.sample(&mut rng, 1.0);
            assert!(cone.contains(&z, 1e-8), "{z:?}");
        }
    }
}
