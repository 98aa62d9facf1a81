//! Finite-difference harness: difference quotients along parameter rays,
//! convergence verdicts, and the consistency inequality they satisfy.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::deriv::DerivativeSolution;
use crate::error::SolverError;
use crate::problem::{ViProblem, ViSolution};
use crate::solver::{solve_elliptic_vi_with, SolveOptions};
use crate::subderiv::QuadraticSubderivative;

/// Difference-quotient data along one parameter ray `p₀ + t q`.
#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    /// Decreasing step sizes.
    pub t_grid: Vec<f64>,
    /// Quotients `y_t = (x̄_t − x̄₀)/t`.
    #[serde(skip)]
    pub quotients: Vec<DVector<f64>>,
    /// `‖y_t − ŷ‖` against the Richardson-extrapolated internal limit ŷ;
    /// [`verify_convergence`] recomputes them against the derivative-VI
    /// solution.
    pub errors: Vec<f64>,
    /// Second-order quotients `(j(x̄₀ + t y_t) − j(x̄₀) − t⟨a₀, y_t⟩)/(t²/2)`.
    pub soq_values: Vec<f64>,
    /// `‖x̄_t − x̄₀‖ / t`.
    pub lipschitz_ratios: Vec<f64>,
    /// Fitted convergence rate of the errors (log-log least squares).
    pub fitted_rate: f64,
    #[serde(skip)]
    pub base_solution: DVector<f64>,
    /// `a₀ = −A(p₀, x̄₀)`.
    #[serde(skip)]
    pub base_slope: DVector<f64>,
}

/// Convergence verdict of a ray against a derivative-VI solution.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceVerdict {
    pub errors: Vec<f64>,
    pub final_error: f64,
    pub errors_decreasing: bool,
    /// Richardson-extrapolated second-order quotient.
    pub soq_extrapolated: f64,
    /// `|soq − Q(y)|`.
    pub soq_gap: f64,
    /// `|⟨A_x y_t, y_t⟩ − ⟨A_x y, y⟩|` per t.
    pub quadform_gaps: Vec<f64>,
    pub fitted_rate: f64,
    pub pass_errors: bool,
    pub pass_soq: bool,
    pub pass_quadform: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub tol_conv: f64,
    pub tol_soq: f64,
    pub tol_quadform: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            tol_conv: 1e-6,
            tol_soq: 1e-4,
            tol_quadform: 1e-4,
        }
    }
}

/// Default ray grid `{1e−1, 3e−2, 1e−2, …, 1e−5}` (geometric, ratio ≈ 1/3).
pub fn default_t_grid() -> Vec<f64> {
    vec![1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5]
}

/// Solve the VI along the ray `p₀ + t q` (largest `t` first, warm-started)
/// and assemble the difference-quotient report.
pub fn run_ray(
    problem: &ViProblem,
    p0: &DVector<f64>,
    q: &DVector<f64>,
    t_grid: &[f64],
    tol: f64,
) -> Result<FdReport, SolverError> {
    let opts = SolveOptions {
        tol,
        ..SolveOptions::default()
    };
    let base = solve_elliptic_vi_with(problem, p0, &DVector::zeros(problem.dim_x), &opts)?;
    run_ray_from(problem, p0, q, t_grid, &opts, &base)
}

/// Variant reusing an existing base solution.
pub fn run_ray_from(
    problem: &ViProblem,
    p0: &DVector<f64>,
    q: &DVector<f64>,
    t_grid: &[f64],
    opts: &SolveOptions,
    base: &ViSolution,
) -> Result<FdReport, SolverError> {
    let x0 = &base.x_bar;
    let a0 = -problem.operator.eval(p0, x0);
    let j0 = problem.nonsmooth.eval(x0);

    let mut quotients = Vec::with_capacity(t_grid.len());
    let mut soq = Vec::with_capacity(t_grid.len());
    let mut lips = Vec::with_capacity(t_grid.len());
    let mut warm = x0.clone();
    for &t in t_grid {
        let p = p0 + q * t;
        let sol = solve_elliptic_vi_with(problem, &p, &warm, opts)?;
        warm = sol.x_bar.clone();
        let y_t = (&sol.x_bar - x0) / t;
        let jt = problem.nonsmooth.eval(&sol.x_bar);
        let soq_t = (jt - j0 - t * a0.dot(&y_t)) / (t * t / 2.0);
        soq.push(soq_t);
        lips.push(y_t.norm());
        quotients.push(y_t);
    }

    // Internal limit estimate: Richardson on the last quotients.
    let limit = richardson_vector(t_grid, &quotients);
    let errors: Vec<f64> = quotients.iter().map(|y| (y - &limit).norm()).collect();
    let fitted_rate = fit_rate(t_grid, &errors);
    Ok(FdReport {
        t_grid: t_grid.to_vec(),
        quotients,
        errors,
        soq_values: soq,
        lipschitz_ratios: lips,
        fitted_rate,
        base_solution: x0.clone(),
        base_slope: a0,
    })
}

/// Check the ray data against the derivative-VI solution: quotient errors,
/// second-order quotient limit, and the quadratic-form limit
/// `⟨A_x y_t, y_t⟩ → ⟨A_x y, y⟩`.
pub fn verify_convergence(
    report: &FdReport,
    sol: &DerivativeSolution,
    q_sub: &QuadraticSubderivative,
    ax: &DMatrix<f64>,
    opts: &VerifyOptions,
) -> ConvergenceVerdict {
    let y = &sol.y;
    let yscale = 1.0 + y.norm();
    let errors: Vec<f64> = report.quotients.iter().map(|yt| (yt - y).norm()).collect();
    let final_error = *errors.last().unwrap_or(&f64::INFINITY);
    let n = errors.len();
    let errors_decreasing =
        n < 2 || final_error <= errors[0] * 1.05 + 1e-12 || final_error <= opts.tol_conv;

    let soq_extrapolated = richardson_scalar(&report.t_grid, &report.soq_values);
    let qy = q_sub.quad_on_cone(&sol.y);
    let soq_gap = (soq_extrapolated - qy).abs();

    let target = (ax * y).dot(y);
    let quadform_gaps: Vec<f64> = report
        .quotients
        .iter()
        .map(|yt| ((ax * yt).dot(yt) - target).abs())
        .collect();
    let quadform_final = *quadform_gaps.last().unwrap_or(&f64::INFINITY);

    let pass_errors = errors_decreasing && final_error <= opts.tol_conv * yscale;
    let pass_soq = soq_gap <= opts.tol_soq * (1.0 + qy.abs());
    let pass_quadform = quadform_final <= opts.tol_quadform * (1.0 + target.abs());
    ConvergenceVerdict {
        errors: errors.clone(),
        final_error,
        errors_decreasing,
        soq_extrapolated,
        soq_gap,
        quadform_gaps,
        fitted_rate: fit_rate(&report.t_grid, &errors),
        pass_errors,
        pass_soq,
        pass_quadform,
        pass: pass_errors && pass_soq && pass_quadform,
    }
}

/// Consistency of the quotient inequality: for each `t` and sampled feasible
/// `z`, the difference-quotient VI holds up to the Taylor remainder
/// `ĥ(t)‖z − y_t‖` with `ĥ(t) = ‖r(t)‖/t`. Returns the smallest margin.
pub fn check_quotient_inequality(
    problem: &ViProblem,
    p0: &DVector<f64>,
    q: &DVector<f64>,
    report: &FdReport,
    samples_per_t: usize,
    seed: u64,
    solver_tol: f64,
) -> f64 {
    let x0 = &report.base_solution;
    let a0 = &report.base_slope;
    let j0 = problem.nonsmooth.eval(x0);
    let ap = problem.operator.jac_p(p0, x0);
    let ax = problem.operator.jac_x(p0, x0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_margin = f64::INFINITY;
    for (k, &t) in report.t_grid.iter().enumerate() {
        let y_t = &report.quotients[k];
        // Taylor remainder of A along the ray.
        let p_t = p0 + q * t;
        let x_t = x0 + y_t * t;
        let r_t = problem.operator.eval(&p_t, &x_t)
            - problem.operator.eval(p0, x0)
            - &ap * q * t
            - &ax * y_t * t;
        let h_hat = r_t.norm() / t;
        let soq_y = report.soq_values[k];
        let grad = &ap * q + &ax * y_t;
        for _ in 0..samples_per_t {
            // Feasible directions: z = (prox-projection of a random point) / t.
            let raw = DVector::from_fn(problem.dim_x, |_, _| {
                rand::Rng::gen_range(&mut rng, -1.0..1.0)
            });
            let stepped = x0 + raw * t;
            let z_point = match problem.nonsmooth.prox(&stepped, t) {
                Ok(v) => v,
                Err(_) => continue,
            };
            let z = (&z_point - x0) / t;
            let jz = problem.nonsmooth.eval(&(x0 + &z * t));
            if !jz.is_finite() {
                continue;
            }
            let soq_z = (jz - j0 - t * a0.dot(&z)) / (t * t / 2.0);
            let margin = grad.dot(&(&z - y_t)) + 0.5 * soq_z - 0.5 * soq_y
                + h_hat * (&z - y_t).norm()
                + 10.0 * solver_tol / (t * t);
            min_margin = min_margin.min(margin);
        }
    }
    min_margin
}

/// Componentwise Aitken extrapolation of the quotient sequence.
fn richardson_vector(t_grid: &[f64], quotients: &[DVector<f64>]) -> DVector<f64> {
    let n = quotients.len();
    if n < 3 {
        return quotients[n - 1].clone();
    }
    let dim = quotients[0].len();
    DVector::from_fn(dim, |i, _| {
        let seq: Vec<(f64, f64)> = t_grid
            .iter()
            .cloned()
            .zip(quotients.iter().map(|v| v[i]))
            .collect();
        aitken_last(&seq)
    })
}

/// Aitken extrapolation of a scalar sequence indexed by the grid.
pub fn richardson_scalar(t_grid: &[f64], values: &[f64]) -> f64 {
    let seq: Vec<(f64, f64)> = t_grid.iter().cloned().zip(values.iter().cloned()).collect();
    aitken_last(&seq)
}

fn aitken_last(seq: &[(f64, f64)]) -> f64 {
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
    if (acc - m3).abs() > 10.0 * (m2 - m3).abs() + 1e-9 {
        m3
    } else {
        acc
    }
}

/// Least-squares slope of `log error` against `log t` (ignoring exhausted
/// errors near machine precision).
pub fn fit_rate(t_grid: &[f64], errors: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = t_grid
        .iter()
        .zip(errors.iter())
        .filter(|(_, &e)| e > 1e-14)
        .map(|(&t, &e)| (t.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        // Errors at machine precision: report the best possible rate marker.
        return f64::INFINITY;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return 0.0;
    }
    (n * sxy - sx * sy) / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonsmooth::Nonsmooth;
    use crate::problem::AffineOperator;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn box_problem() -> ViProblem {
        ViProblem {
            dim_x: 2,
            dim_p: 2,
            operator: Arc::new(AffineOperator::projection(2)),
            nonsmooth: Nonsmooth::IndicatorBox {
                lower: DVector::from_element(2, -1.0),
                upper: DVector::from_element(2, 1.0),
            },
            monotonicity_constant: 1.0,
        }
    }

    #[test]
    fn box_ray_quotients_are_exact() {
        // S(p) = proj(p): along p₀ = (2, 0.5), q = (1,1) the map is affine
        // with derivative (0,1) for every t ≤ 0.5.
        let prob = box_problem();
        let p0 = DVector::from_row_slice(&[2.0, 0.5]);
        let q = DVector::from_row_slice(&[1.0, 1.0]);
        let grid = default_t_grid();
        let report = run_ray(&prob, &p0, &q, &grid, 1e-12).unwrap();
        for y in &report.quotients {
            assert_relative_eq!(y[0], 0.0, epsilon = 1e-9);
            assert_relative_eq!(y[1], 1.0, epsilon = 1e-7);
        }
        for &s in &report.soq_values {
            assert!(s.abs() < 1e-6, "soq {s}");
        }
    }

    #[test]
    fn zero_direction_zero_quotients() {
        let prob = box_problem();
        let p0 = DVector::from_row_slice(&[0.3, 0.1]);
        let q = DVector::zeros(2);
        let report = run_ray(&prob, &p0, &q, &default_t_grid(), 1e-12).unwrap();
        for y in &report.quotients {
            assert!(y.norm() < 1e-6);
        }
    }

    #[test]
    fn soft_threshold_ray_stays_zero() {
        // j = |·|, p₀ = 0.5, q = 1: S ≡ 0 for |p| ≤ 1, so y_t = 0 for t < 0.5.
        let prob = ViProblem {
            dim_x: 1,
            dim_p: 1,
            operator: Arc::new(AffineOperator::projection(1)),
            nonsmooth: Nonsmooth::OneNormScaled {
                weights: DVector::from_element(1, 1.0),
            },
            monotonicity_constant: 1.0,
        };
        let report = run_ray(
            &prob,
            &DVector::from_row_slice(&[0.5]),
            &DVector::from_row_slice(&[1.0]),
            &default_t_grid(),
            1e-12,
        )
        .unwrap();
        for y in &report.quotients {
            assert!(y[0].abs() < 1e-7, "{}", y[0]);
        }
    }
}
