//! Reference optima and bound checkers.
//!
//! Each checker is a pure function of its inputs (and a seed where it
//! samples), so a report can be replayed exactly.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::compression::CompressorSpec;
use crate::error::{invalid, FlixError, Result};
use crate::flix::FlixProblem;
use crate::linalg;
use crate::solvers::Trajectory;

pub mod suite;

/// Absolute slack for comparing objective gaps against bounds that fall
/// below what double precision can resolve, relative to `max(1, |f*|)`.
pub const ROUNDOFF_SLACK: f64 = 1e-14;

/// Iteration cap for the gradient-descent reference solve.
pub const REFERENCE_MAX_ITER: usize = 2_000_000;

/// A certified minimizer of the mixture objective.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceOptimum {
    pub x_star: Vec<f64>,
    pub f_star: f64,
    /// `‖∇f̃(x_star)‖`
    pub certificate: f64,
}

/// Solves `(Σ α_i² A_i) x = Σ α_i² A_i x_i` for quadratic clients.
pub fn quad_flix_minimizer(p: &FlixProblem) -> Result<Vec<f64>> {
    let d = p.dim();
    let mut lhs = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    for ((c, a), xi) in p.clients().iter().zip(p.alpha().as_slice()).zip(p.local_models()) {
        let q = c
            .as_quadratic()
            .ok_or_else(|| invalid("closed-form minimizer needs quadratic clients"))?;
        let w = a * a;
        lhs += q.matrix() * w;
        rhs += q.matrix() * DVector::from_column_slice(xi) * w;
    }
    let lu = lhs.lu();
    let x = lu
        .solve(&rhs)
        .ok_or_else(|| FlixError::InvalidState("weighted curvature matrix is singular".into()))?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(FlixError::InvalidState("weighted curvature matrix is singular".into()));
    }
    Ok(x.iter().copied().collect())
}

/// Minimizer of the mixture objective to gradient norm `tol`.
///
/// Quadratic problems use [`quad_flix_minimizer`]. Otherwise gradient
/// descent at `1/L_α` runs from the one-shot average; when `μ_α = 0` the
/// tolerance is relaxed to `1e-10`.
pub fn high_precision_optimum(p: &FlixProblem, tol: f64) -> Result<ReferenceOptimum> {
    if p.alpha().is_all_zero() {
        return Err(FlixError::InvalidState(
            "all personalization weights are zero; every point is optimal".into(),
        ));
    }
    let x_star = if p.clients().iter().all(|c| c.as_quadratic().is_some()) {
        quad_flix_minimizer(p)?
    } else {
        let agg = p.aggregate_constants();
        let tol = if agg.mu_alpha > 0.0 { tol } else { tol.max(1e-10) };
        let step = 1.0 / agg.l_alpha;
        let mut x = p.one_shot_average()?.x_avg;
        let mut g = p.grad(&x)?;
        let mut it = 0;
        while linalg::norm(&g) > tol {
            if it == REFERENCE_MAX_ITER {
                return Err(FlixError::ConvergenceFailure {
                    iterations: it,
                    grad_norm: linalg::norm(&g),
                });
            }
            linalg::axpy(-step, &g, &mut x);
            g = p.grad(&x)?;
            it += 1;
        }
        x
    };
    let certificate = linalg::norm(&p.grad(&x_star)?);
    let f_star = p.value(&x_star)?;
    Ok(ReferenceOptimum {
        x_star,
        f_star,
        certificate,
    })
}

/// Runs `h` gradient steps on `½xᵀAx − bᵀx` from `x0` and returns the
/// largest coordinate gap to `(I − J^h) x_opt + J^h x0`, `J = I − γA`.
pub fn check_quad_finetune(a: &DMatrix<f64>, b: &DVector<f64>, x0: &DVector<f64>, gamma: f64, h: usize) -> Result<f64> {
    let d = a.nrows();
    let x_opt = a
        .clone()
        .cholesky()
        .ok_or_else(|| invalid("matrix is not positive definite"))?
        .solve(b);
    let mut x = x0.clone();
    for _ in 0..h {
        x -= (a * &x - b) * gamma;
    }
    let j = DMatrix::identity(d, d) - a * gamma;
    let mut jh = DMatrix::identity(d, d);
    for _ in 0..h {
        jh = &jh * &j;
    }
    let closed = (DMatrix::identity(d, d) - &jh) * x_opt + &jh * x0;
    Ok((x - closed).amax())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateViolation {
    pub round: usize,
    pub bound: &'static str,
    pub gap: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub rounds_checked: usize,
    pub violations: Vec<RateViolation>,
    /// Largest `gap / limit` over all rounds and bounds, leaving out the
    /// trivial round-0 contraction.
    pub worst_ratio: f64,
}

impl RateReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn first_violation(&self) -> Option<usize> {
        self.violations.iter().map(|v| v.round).min()
    }
}

/// Checks a gradient-descent trajectory against the linear-rate bounds:
///
/// * `gap_k ≤ (1 − μ_α/L_α)^k · gap_0`
/// * `gap_k ≤ (1 − μ_α/L_α)^k · α_max² L̂ D / 2`
/// * for equal weights `β`: `gap_k ≤ (1 − μ̂/L̂)^k · β² L̂ V / 2`
///
/// where `gap_k = f̃(x^k) − f̃*`. Gaps are compared with an absolute slack
/// of [`ROUNDOFF_SLACK`]` · max(1, |f̃*|)`.
pub fn check_dgd_rate(p: &FlixProblem, traj: &Trajectory, reference: &ReferenceOptimum) -> Result<RateReport> {
    let agg = p.aggregate_constants();
    let het = p.one_shot_average()?;
    let slack = ROUNDOFF_SLACK * reference.f_star.abs().max(1.0);
    let rho = 1.0 - agg.mu_alpha / agg.l_alpha;
    let rho_hat = 1.0 - agg.mu_hat / agg.l_hat;
    let gap0 = traj.records[0].value - reference.f_star;
    let init_any = p.alpha().max().powi(2) * agg.l_hat * het.d / 2.0;
    let init_equal = p.alpha().common().map(|b| b * b * agg.l_hat * het.v / 2.0);

    let mut violations = Vec::new();
    let mut worst: f64 = 0.0;
    for r in &traj.records {
        let gap = r.value - reference.f_star;
        let k = r.round as i32;
        let mut bounds = vec![
            ("contraction", rho.powi(k) * gap0),
            ("one_shot_any_alpha", rho.powi(k) * init_any),
        ];
        if let Some(b) = init_equal {
            bounds.push(("one_shot_equal_alpha", rho_hat.powi(k) * b));
        }
        for (name, limit) in bounds {
            // the contraction bound is an identity at round 0
            if limit > 0.0 && (r.round > 0 || name != "contraction") {
                worst = worst.max(gap / limit);
            }
            if !(gap <= limit + slack) {
                violations.push(RateViolation {
                    round: r.round,
                    bound: name,
                    gap,
                    limit,
                });
            }
        }
    }
    Ok(RateReport {
        rounds_checked: traj.records.len(),
        violations,
        worst_ratio: worst,
    })
}

/// `2γ/(μ_α n²) · Σ ω_i ‖α_i ∇f_i(T_i(x*))‖²`, the radius of the region
/// compressed gradient descent settles into (in expected squared distance).
pub fn dcgd_floor(p: &FlixProblem, specs: &[CompressorSpec], gamma: f64, x_star: &[f64]) -> Result<f64> {
    if specs.len() != p.n() {
        return Err(invalid("one compressor per client is required"));
    }
    let mu_alpha = p.aggregate_constants().mu_alpha;
    if !(mu_alpha > 0.0) {
        return Err(FlixError::Unsupported("the floor needs mu_alpha > 0".into()));
    }
    let n = p.n() as f64;
    let sum: f64 = p
        .client_grads(x_star)?
        .iter()
        .zip(specs)
        .map(|(g, s)| s.omega() * linalg::norm_sq(g))
        .sum();
    Ok(2.0 * gamma / (mu_alpha * n * n) * sum)
}

/// Largest `‖∇f̃(x) − ∇f̃(y)‖ / ‖x − y‖` over `samples` random pairs.
///
/// Centers are Gaussian around the one-shot average (or the origin) and
/// separations have log-uniform scale in `[1e-3, 1]`.
pub fn estimate_smoothness(p: &FlixProblem, samples: usize, seed: u64) -> Result<f64> {
    if samples < 2 {
        return Err(invalid("need at least two samples"));
    }
    let d = p.dim();
    let center = p.one_shot_average().map(|h| h.x_avg).unwrap_or_else(|_| vec![0.0; d]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    for _ in 0..samples {
        let x: Vec<f64> = center
            .iter()
            .map(|c| c + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let r = (rng.random_range((1e-3f64).ln()..0.0)).exp();
        let y: Vec<f64> = x.iter().map(|v| v + r * rng.sample::<f64, _>(StandardNormal)).collect();
        let num = linalg::norm(&linalg::sub(&p.grad(&x)?, &p.grad(&y)?));
        let den = linalg::norm(&linalg::sub(&x, &y));
        if den > 0.0 {
            best = best.max(num / den);
        }
    }
    Ok(best)
}

/// `(‖∇f̃(x)‖, (1/n) Σ α_i² L_i ‖x − x_i‖)`
pub fn gradient_local_bound(p: &FlixProblem, x: &[f64]) -> Result<(f64, f64)> {
    let n = p.n() as f64;
    let rhs = p
        .alpha()
        .as_slice()
        .iter()
        .zip(p.constants())
        .zip(p.local_models())
        .map(|((a, c), xi)| a * a * c.l * linalg::dist_sq(x, xi).sqrt())
        .sum::<f64>()
        / n;
    Ok((linalg::norm(&p.grad(x)?), rhs))
}

/// `(f̃(x), (1/n) Σ f_i(x_i) + (1/2n) Σ α_i² L_i ‖x − x_i‖²)`
pub fn function_local_bound(p: &FlixProblem, x: &[f64]) -> Result<(f64, f64)> {
    let n = p.n() as f64;
    let mut rhs = 0.0;
    for (((c, a), k), xi) in p
        .clients()
        .iter()
        .zip(p.alpha().as_slice())
        .zip(p.constants())
        .zip(p.local_models())
    {
        rhs += c.value(xi)? + 0.5 * a * a * k.l * linalg::dist_sq(x, xi);
    }
    Ok((p.value(x)?, rhs / n))
}

/// `(‖x0 − x*‖², (1/μ̂)·(1/n) Σ L_i ‖x0 − x_i‖²)`
pub fn distance_to_optimum_bound(p: &FlixProblem, x0: &[f64], x_star: &[f64]) -> (f64, f64) {
    let agg = p.aggregate_constants();
    let n = p.n() as f64;
    let avg = p
        .constants()
        .iter()
        .zip(p.local_models())
        .map(|(c, xi)| c.l * linalg::dist_sq(x0, xi))
        .sum::<f64>()
        / n;
    (linalg::dist_sq(x0, x_star), avg / agg.mu_hat)
}

/// `((1/n) Σ ‖x_i − x*‖², (max_i L_i / μ̂) · max_{i,j} ‖x_i − x_j‖²)`
pub fn average_distance_bound(p: &FlixProblem, x_star: &[f64]) -> (f64, f64) {
    let agg = p.aggregate_constants();
    let n = p.n() as f64;
    let lhs = p
        .local_models()
        .iter()
        .map(|xi| linalg::dist_sq(xi, x_star))
        .sum::<f64>()
        / n;
    let max_l = p.constants().iter().map(|c| c.l).fold(0.0, f64::max);
    (lhs, max_l / agg.mu_hat * p.max_pairwise_dist_sq())
}
