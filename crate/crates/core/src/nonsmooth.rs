//! Catalog of nonsmooth functionals `j : ℝⁿ → (−∞, ∞]` with exact proximal maps.
//!
//! Every kind provides the evaluation `j(x)` and the proximal map
//! `prox_{σj}(v) = argmin_z σ j(z) + ½‖z − v‖²`, exact up to the stated
//! machine-level tolerances (closed form, exact QP, or a scalar dual Newton
//! for the per-cell ball constraints).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::SolverError;
use crate::qp::solve_qp;

/// Feasibility slack used when evaluating indicator functions.
pub const FEAS_EPS: f64 = 1e-12;

/// A user-supplied functional with its proximal map.
pub struct CustomFunctional {
    pub eval: Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
    pub prox: Box<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>,
}

impl fmt::Debug for CustomFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomFunctional")
    }
}

/// The nonsmooth part `j` of a VI of the second kind.
#[derive(Debug, Clone)]
pub enum Nonsmooth {
    /// Indicator of the box `[lower, upper]`.
    IndicatorBox {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
    /// Indicator of `{x : N x ≤ b}`; `interior` is a known feasible point.
    IndicatorPolyhedron {
        normals: DMatrix<f64>,
        offsets: DVector<f64>,
        interior: DVector<f64>,
    },
    /// Indicator of the product over `cells` of `{σ ∈ ℝᵐ : |Dσ| ≤ 1}`,
    /// the constraint set of the elastoplastic saddle problem.
    IndicatorPointwiseBall { d: DMatrix<f64>, cells: usize },
    /// Weighted 1-norm `j(x) = Σᵢ wᵢ |xᵢ|` with `wᵢ > 0`.
    OneNormScaled { weights: DVector<f64> },
    /// Indicator of the prox-regular set `K = {x : ‖x‖ ≥ radius}`.
    IndicatorBallComplement { radius: f64 },
    /// Arbitrary evaluation/prox pair.
    Custom(Arc<CustomFunctional>),
}

impl Nonsmooth {
    /// Evaluate `j(x)`; `+∞` outside the domain of an indicator.
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            Nonsmooth::IndicatorBox { lower, upper } => {
                for i in 0..x.len() {
                    if x[i] < lower[i] - FEAS_EPS || x[i] > upper[i] + FEAS_EPS {
                        return f64::INFINITY;
                    }
                }
                0.0
            }
            Nonsmooth::IndicatorPolyhedron {
                normals, offsets, ..
            } => {
                let s = normals * x - offsets;
                let scale = 1.0 + offsets.amax();
                if s.iter().any(|&v| v > FEAS_EPS * scale) {
                    f64::INFINITY
                } else {
                    0.0
                }
            }
            Nonsmooth::IndicatorPointwiseBall { d, cells } => {
                let m = d.ncols();
                for i in 0..*cells {
                    let sigma = x.rows(i * m, m);
                    if (d * sigma).norm_squared() > 1.0 + 2.0 * FEAS_EPS {
                        return f64::INFINITY;
                    }
                }
                0.0
            }
            Nonsmooth::OneNormScaled { weights } => {
                x.iter().zip(weights.iter()).map(|(v, w)| w * v.abs()).sum()
            }
            Nonsmooth::IndicatorBallComplement { radius } => {
                if x.norm() >= radius - FEAS_EPS {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Nonsmooth::Custom(c) => (c.eval)(x),
        }
    }

    /// The proximal map `prox_{σj}(v)`.
    pub fn prox(&self, v: &DVector<f64>, sigma: f64) -> Result<DVector<f64>, SolverError> {
        match self {
            Nonsmooth::IndicatorBox { lower, upper } => {
                let mut z = v.clone();
                for i in 0..z.len() {
                    z[i] = z[i].max(lower[i]).min(upper[i]);
                }
                Ok(z)
            }
            Nonsmooth::IndicatorPolyhedron {
                normals, offsets, ..
            } => {
                let s = normals * v - offsets;
                if s.iter().all(|&t| t <= 0.0) {
                    return Ok(v.clone());
                }
                let h = DMatrix::identity(v.len(), v.len());
                let c = -v;
                let sol = solve_qp(&h, &c, None, Some((normals, offsets)))?;
                Ok(sol.x)
            }
            Nonsmooth::IndicatorPointwiseBall { d, cells } => {
                let m = d.ncols();
                let mut z = v.clone();
                for i in 0..*cells {
                    let cell = project_cell_ball(d, &v.rows(i * m, m).clone_owned());
                    z.rows_mut(i * m, m).copy_from(&cell);
                }
                Ok(z)
            }
            Nonsmooth::OneNormScaled { weights } => {
                let mut z = v.clone();
                for i in 0..z.len() {
                    let th = sigma * weights[i];
                    z[i] = if z[i] > th {
                        z[i] - th
                    } else if z[i] < -th {
                        z[i] + th
                    } else {
                        0.0
                    };
                }
                Ok(z)
            }
            Nonsmooth::IndicatorBallComplement { radius } => {
                let norm = v.norm();
                if norm >= *radius {
                    Ok(v.clone())
                } else if norm > 0.0 {
                    Ok(v * (radius / norm))
                } else {
                    Err(SolverError::AmbiguousProx)
                }
            }
            Nonsmooth::Custom(c) => Ok((c.prox)(v, sigma)),
        }
    }

    /// Whether `j` is an indicator function (VI of the first kind).
    pub fn is_indicator(&self) -> bool {
        !matches!(
            self,
            Nonsmooth::OneNormScaled { .. } | Nonsmooth::Custom(_)
        )
    }
}

/// Exact Euclidean projection of `v ∈ ℝᵐ` onto `{σ : ‖Dσ‖ ≤ 1}`.
///
/// Uses the eigendecomposition of `D'D`: the projection is
/// `(I + ν D'D)⁻¹ v` where `ν ≥ 0` solves `‖D (I+νD'D)⁻¹ v‖ = 1`,
/// found by a safeguarded Newton iteration on the monotone scalar equation.
pub fn project_cell_ball(d: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    if (d * v).norm_squared() <= 1.0 {
        return v.clone();
    }
    let dtd = d.transpose() * d;
    let eig = dtd.symmetric_eigen();
    let coeff = eig.eigenvectors.transpose() * v;
    // φ(ν) = Σ λⱼ cⱼ² / (1 + ν λⱼ)² − 1, strictly decreasing in ν ≥ 0.
    let phi = |nu: f64| -> (f64, f64) {
        let mut val = -1.0;
        let mut der = 0.0;
        for j in 0..coeff.len() {
            let lam = eig.eigenvalues[j].max(0.0);
            let den = 1.0 + nu * lam;
            val += lam * coeff[j] * coeff[j] / (den * den);
            der += -2.0 * lam * lam * coeff[j] * coeff[j] / (den * den * den);
        }
        (val, der)
    };
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while phi(hi).0 > 0.0 {
        hi *= 4.0;
        if hi > 1e18 {
            break;
        }
    }
    let mut nu = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (val, der) = phi(nu);
        if val.abs() < 1e-15 {
            break;
        }
        if val > 0.0 {
            lo = nu;
        } else {
            hi = nu;
        }
        if (hi - lo) < 1e-16 * (1.0 + hi) {
            break;
        }
        let step = if der.abs() > 1e-300 { -val / der } else { 0.0 };
        let cand = nu + step;
        nu = if cand > lo && cand < hi {
            cand
        } else {
            0.5 * (lo + hi)
        };
    }
    let mut scaled = coeff;
    for j in 0..scaled.len() {
        scaled[j] /= 1.0 + nu * eig.eigenvalues[j].max(0.0);
    }
    &eig.eigenvectors * scaled
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn box_prox_clamps() {
        let j = Nonsmooth::IndicatorBox {
            lower: DVector::from_element(2, -1.0),
            upper: DVector::from_element(2, 1.0),
        };
        let z = j.prox(&DVector::from_row_slice(&[2.0, 0.5]), 1.0).unwrap();
        assert_relative_eq!(z[0], 1.0);
        assert_relative_eq!(z[1], 0.5);
    }

    #[test]
    fn soft_threshold() {
        let j = Nonsmooth::OneNormScaled {
            weights: DVector::from_element(1, 1.0),
        };
        let z = j.prox(&DVector::from_row_slice(&[0.5]), 1.0).unwrap();
        assert_relative_eq!(z[0], 0.0);
        let z = j.prox(&DVector::from_row_slice(&[1.5]), 1.0).unwrap();
        assert_relative_eq!(z[0], 0.5);
    }

    #[test]
    fn ball_complement_prox() {
        let j = Nonsmooth::IndicatorBallComplement { radius: 1.0 };
        let z = j.prox(&DVector::from_row_slice(&[0.5, 0.0]), 1.0).unwrap();
        assert_relative_eq!(z[0], 1.0, epsilon = 1e-14);
        assert!(matches!(
            j.prox(&DVector::zeros(2), 1.0),
            Err(SolverError::AmbiguousProx)
        ));
    }

    #[test]
    fn cell_ball_projection_is_optimal() {
        // Dual-Newton projection beats a dense sweep of feasible candidates.
        let d = DMatrix::from_row_slice(1, 2, &[2.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let v = DVector::from_fn(2, |_, _| rng.gen_range(-3.0..3.0));
            let p = project_cell_ball(&d, &v);
            assert!((&d * &p).norm() <= 1.0 + 1e-10);
            let best = (&p - &v).norm_squared();
            for a in -60..=60 {
                for b in -60..=60 {
                    let z = DVector::from_row_slice(&[a as f64 * 0.05, b as f64 * 0.05]);
                    if (&d * &z).norm() <= 1.0 {
                        assert!((&z - &v).norm_squared() >= best - 1e-8);
                    }
                }
            }
        }
    }
}
