//! Brute-force evaluation of the second subderivative
//!
//! ```text
//!     Q(z) = inf { liminf (j(x + tₙ zₙ) − j(x) − tₙ⟨g, zₙ⟩)/(tₙ²/2)
//!                  : tₙ ↓ 0, zₙ → z }
//! ```
//!
//! by minimizing the second-order quotient over a shrinking ball around `z`
//! for each `t` of a grid, then extrapolating in `t`. In finite dimensions
//! weak-star and strong convergence coincide, so the ball search evaluates
//! the defining infimum directly. The minimization combines a quasi-random
//! (Halton) sweep with a coordinate pattern search started from the best
//! candidates; pure sampling alone cannot resolve directions that must
//! approach an active face tangentially.
//!
//! The oracle touches only `j`-evaluations and is independent of the
//! catalog formulas it cross-checks.

use nalgebra::DVector;

/// Options for [`q_bruteforce_oracle`].
#[derive(Debug, Clone)]
pub struct OracleOptions {
    /// Decreasing grid of quotient parameters `t`.
    pub t_grid: Vec<f64>,
    /// Ball radius around `z` at `t = 1` (shrinks as `√t`).
    pub radius: f64,
    /// Quasi-random samples per grid point.
    pub samples: usize,
    /// Quotients above this value (after extrapolation) report `+∞`.
    pub infinity_threshold: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            t_grid: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
            radius: 1.0,
            samples: 4096,
            infinity_threshold: 1e6,
        }
    }
}

/// Numerically evaluate `Q_j^{x,g}(z)`; returns `f64::INFINITY` when the
/// quotient diverges for all sampled recovery directions.
pub fn q_bruteforce_oracle(
    j: &dyn Fn(&DVector<f64>) -> f64,
    x: &DVector<f64>,
    g: &DVector<f64>,
    z: &DVector<f64>,
    opts: &OracleOptions,
) -> f64 {
    let jx = j(x);
    assert!(jx.is_finite(), "base point must lie in dom(j)");
    let quotient = |t: f64, zp: &DVector<f64>| -> f64 {
        let val = j(&(x + zp * t));
        if !val.is_finite() {
            return f64::INFINITY;
        }
        (val - jx - t * g.dot(zp)) / (t * t / 2.0)
    };

    let dim = z.len();
    let mut per_t: Vec<f64> = Vec::with_capacity(opts.t_grid.len());
    for &t in &opts.t_grid {
        let rho = opts.radius * t.sqrt();
        let mut best = quotient(t, z);
        let mut seeds: Vec<(f64, DVector<f64>)> = vec![(best, z.clone())];

        // Quasi-random sweep of the ball.
        let mut idx = 1usize;
        let mut accepted = 0usize;
        while accepted < opts.samples && idx < 50 * opts.samples {
            let u = halton_point(idx, dim);
            idx += 1;
            let mut dz = DVector::zeros(dim);
            let mut norm2 = 0.0;
            for k in 0..dim {
                dz[k] = 2.0 * u[k] - 1.0;
                norm2 += dz[k] * dz[k];
            }
            if norm2 > 1.0 {
                continue;
            }
            accepted += 1;
            let cand = z + dz * rho;
            let q = quotient(t, &cand);
            if q < best {
                best = q;
            }
            if q.is_finite() {
                seeds.push((q, cand));
                seeds.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                seeds.truncate(3);
            }
        }

        // Pattern-search refinement from the best candidates.
        for (_, start) in seeds {
            let refined = pattern_search(&|zp| quotient(t, zp), &start, z, rho);
            if refined < best {
                best = refined;
            }
        }
        per_t.push(best);
    }

    let finite: Vec<(f64, f64)> = opts
        .t_grid
        .iter()
        .cloned()
        .zip(per_t.iter().cloned())
        .filter(|(_, m)| m.is_finite())
        .collect();
    if finite.is_empty() {
        return f64::INFINITY;
    }
    let (t_last, last) = *finite.last().unwrap();
    if last.abs() > opts.infinity_threshold {
        return last.signum() * f64::INFINITY;
    }
    // 1/t-divergence test: a quotient growing like C/t has m(t)·t ≈ const.
    if finite.len() >= 2 {
        let (t_prev, prev) = finite[finite.len() - 2];
        if last.abs() > 1e3 && (last * t_last).abs() > 0.3 * (prev * t_prev).abs() {
            return last.signum() * f64::INFINITY;
        }
    }
    let extrapolated = aitken(&finite);
    if extrapolated.abs() > opts.infinity_threshold {
        extrapolated.signum() * f64::INFINITY
    } else {
        extrapolated
    }
}

/// Coordinate pattern search of `f` within the ball `‖zp − center‖ ≤ rho`,
/// with independent per-coordinate step sizes. Constraint boundaries make
/// the quotient a narrow curved valley (one stiff coordinate, the rest
/// flat); separate steps let the stiff coordinate shrink without freezing
/// the tangential progress.
fn pattern_search(
    f: &dyn Fn(&DVector<f64>) -> f64,
    start: &DVector<f64>,
    center: &DVector<f64>,
    rho: f64,
) -> f64 {
    let dim = start.len();
    let mut point = start.clone();
    let mut best = f(&point);
    let mut steps = vec![rho / 2.0; dim];
    let mut evals = 0usize;
    let floor = 1e-16 * (1.0 + rho);
    while evals < 2000 && steps.iter().any(|&s| s > floor) {
        let mut any = false;
        for k in 0..dim {
            if steps[k] <= floor {
                continue;
            }
            let mut moved = false;
            for sgn in [1.0f64, -1.0] {
                let mut cand = point.clone();
                cand[k] += sgn * steps[k];
                // Slide along the ball boundary rather than rejecting.
                let dist = (&cand - center).norm();
                if dist > rho {
                    cand = center + (&cand - center) * (rho / dist);
                }
                let v = f(&cand);
                evals += 1;
                if v < best - 1e-16 * (1.0 + best.abs()) {
                    best = v;
                    point = cand;
                    moved = true;
                    break;
                }
            }
            if moved {
                steps[k] = (steps[k] * 1.6).min(rho / 2.0);
                any = true;
            } else {
                steps[k] *= 0.35;
            }
        }
        if !any && steps.iter().all(|&s| s <= floor) {
            break;
        }
    }
    best
}

/// Aitken Δ² extrapolation of the last three quotient values; falls back to
/// the last value when the sequence is not geometrically decreasing.
fn aitken(seq: &[(f64, f64)]) -> f64 {
    let n = seq.len();
    if n < 3 {
        return seq[n - 1].1;
    }
    let m1 = seq[n - 3].1;
    let m2 = seq[n - 2].1;
    let m3 = seq[n - 1].1;
    let denom = (m3 - m2) - (m2 - m1);
    if denom.abs() < 1e-14 * (1.0 + m3.abs()) {
        return m3;
    }
    let acc = m3 - (m3 - m2) * (m3 - m2) / denom;
    // Guard against wild extrapolation of noisy sequences.
    if (acc - m3).abs() > (m2 - m3).abs() * 10.0 + 1e-9 {
        m3
    } else {
        acc
    }
}

/// `idx`-th point of the Halton sequence in `[0,1]^dim` (bases 2, 3, 5, 7).
fn halton_point(idx: usize, dim: usize) -> Vec<f64> {
    const BASES: [usize; 4] = [2, 3, 5, 7];
    (0..dim)
        .map(|k| radical_inverse(idx, BASES[k % BASES.len()]))
        .collect()
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonsmooth::Nonsmooth;
    use approx::assert_relative_eq;

    fn box_j(dim: usize) -> impl Fn(&DVector<f64>) -> f64 {
        let j = Nonsmooth::IndicatorBox {
            lower: DVector::from_element(dim, -1.0),
            upper: DVector::from_element(dim, 1.0),
        };
        move |v: &DVector<f64>| j.eval(v)
    }

    #[test]
    fn diverging_direction_reports_infinity() {
        // j = δ_[−1,1], x = 1, g = 1, z = −1: ⟨g,z⟩ ≠ 0, quotient ~ 2/t → ∞.
        let j = box_j(1);
        let v = q_bruteforce_oracle(
            &j,
            &DVector::from_row_slice(&[1.0]),
            &DVector::from_row_slice(&[1.0]),
            &DVector::from_row_slice(&[-1.0]),
            &OracleOptions::default(),
        );
        assert!(v.is_infinite() || v > 1e4, "oracle value {v}");
    }

    #[test]
    fn zero_direction_gives_zero() {
        let j = box_j(1);
        let v = q_bruteforce_oracle(
            &j,
            &DVector::from_row_slice(&[1.0]),
            &DVector::from_row_slice(&[1.0]),
            &DVector::zeros(1),
            &OracleOptions::default(),
        );
        assert_relative_eq!(v, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn tangential_face_direction_gives_zero() {
        // x = (1, 0.5) on the face, g = (2, 0), z = (0, 1): Q = 0, but the
        // minimizing sequence must approach the face tangentially.
        let j = box_j(2);
        let v = q_bruteforce_oracle(
            &j,
            &DVector::from_row_slice(&[1.0, 0.5]),
            &DVector::from_row_slice(&[2.0, 0.0]),
            &DVector::from_row_slice(&[0.0, 1.0]),
            &OracleOptions::default(),
        );
        assert!(v.abs() < 1e-3, "oracle value {v}");
    }

    #[test]
    fn sphere_curvature_direction() {
        // j = ½‖·‖² + δ_{‖x‖≥1} at x̄ = (1,0) with slope p₀ = x̄ + v,
        // v = −0.5 e₁: Q(z) = ‖z‖² − 0.5‖z_tan‖² on the tangent plane.
        let ind = Nonsmooth::IndicatorBallComplement { radius: 1.0 };
        let j = move |v: &DVector<f64>| 0.5 * v.norm_squared() + ind.eval(v);
        let x = DVector::from_row_slice(&[1.0, 0.0]);
        let g = DVector::from_row_slice(&[0.5, 0.0]); // x̄ + v with v = −0.5e₁
        let z = DVector::from_row_slice(&[0.0, 1.0]);
        let v = q_bruteforce_oracle(&j, &x, &g, &z, &OracleOptions::default());
        assert_relative_eq!(v, 0.5, epsilon = 2e-3);
    }
}
