//! Local pretraining and the distributed solvers: gradient descent (DGD),
//! compressed gradient descent (DCGD) and DIANA.
//!
//! Every solver records one [`RoundRecord`] per iterate `x^0, …, x^K`.
//! Per-client work in a round runs on the current rayon pool; the server
//! reduction is always a sequential sum in client order, so results do
//! not depend on the thread count.

use rayon::prelude::*;
use serde::Serialize;

use crate::compression::{client_rng, CompressorSpec};
use crate::error::{invalid, FlixError, Result};
use crate::flix::FlixProblem;
use crate::linalg;
use crate::objectives::ClientObjective;

/// Gradient descent at step `1/L` from the origin until `‖∇f‖ ≤ tol`.
/// Quadratics use their exact minimizer, which must pass the same check.
pub fn solve_local(obj: &ClientObjective, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    if let ClientObjective::Quadratic(q) = obj {
        let x = q.minimizer().to_vec();
        let g = linalg::norm(&q.grad(&x)?);
        if g > tol {
            return Err(FlixError::ConvergenceFailure {
                iterations: 0,
                grad_norm: g,
            });
        }
        return Ok(x);
    }
    let step = 1.0 / obj.constants()?.l;
    let mut x = vec![0.0; obj.dim()];
    let mut g = obj.grad(&x)?;
    let mut gn = linalg::norm(&g);
    for _ in 0..max_iter {
        if gn <= tol {
            return Ok(x);
        }
        linalg::axpy(-step, &g, &mut x);
        g = obj.grad(&x)?;
        gn = linalg::norm(&g);
    }
    if gn <= tol {
        return Ok(x);
    }
    Err(FlixError::ConvergenceFailure {
        iterations: max_iter,
        grad_norm: gn,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepsizeMode {
    Theoretical,
    Manual(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// The one-shot weighted average of local models.
    OneShot,
    Point(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Dgd,
    Dcgd,
    Diana,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Dgd => "dgd",
            Self::Dcgd => "dcgd",
            Self::Diana => "diana",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions<'a> {
    pub mode: StepsizeMode,
    pub rounds: usize,
    pub init: Init,
    /// Reference optimum used to fill the distance columns.
    pub reference: Option<&'a [f64]>,
}

impl<'a> RunOptions<'a> {
    pub fn new(mode: StepsizeMode, rounds: usize) -> Self {
        Self {
            mode,
            rounds,
            init: Init::OneShot,
            reference: None,
        }
    }

    pub fn with_reference(mut self, x_star: &'a [f64]) -> Self {
        self.reference = Some(x_star);
        self
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    /// `f̃(x^k)`
    pub value: f64,
    /// `‖∇f̃(x^k)‖²`
    pub grad_norm_sq: f64,
    /// `‖x^k − x*‖²`
    pub dist_sq: Option<f64>,
    /// `(1/n) Σ ‖T_i(x^k) − T_i(x*)‖²`
    pub deploy_dist_sq: Option<f64>,
    /// Floats sent from clients to the server before this iterate.
    pub uplink_floats: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMeta {
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub mode: StepsizeMode,
    pub seed: Option<u64>,
    pub omegas: Vec<f64>,
    /// DIANA memory learning rates.
    pub betas: Vec<f64>,
    pub one_shot_init: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<RoundRecord>,
    pub meta: RunMeta,
    pub x0: Vec<f64>,
    pub x_final: Vec<f64>,
}

impl Trajectory {
    pub fn final_record(&self) -> &RoundRecord {
        self.records.last().expect("trajectory always holds x^0")
    }
}

/// Per-client DIANA memories `h_i`, their running average `h`, and the
/// memory learning rates `β_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DianaState {
    pub memories: Vec<Vec<f64>>,
    pub average: Vec<f64>,
    pub betas: Vec<f64>,
}

impl DianaState {
    /// Memories start at the client gradient messages at `x^0`.
    pub fn new(initial: Vec<Vec<f64>>, betas: Vec<f64>) -> Self {
        let d = initial.first().map(Vec::len).unwrap_or(0);
        let average = linalg::ordered_mean(&initial, d);
        Self {
            memories: initial,
            average,
            betas,
        }
    }

    /// Largest deviation between `h` and the recomputed average of `h_i`.
    pub fn drift(&self) -> f64 {
        let fresh = linalg::ordered_mean(&self.memories, self.average.len());
        linalg::max_abs_diff(&fresh, &self.average)
    }
}

/// `1/L_α`
pub fn dgd_stepsize(p: &FlixProblem) -> f64 {
    1.0 / p.aggregate_constants().l_alpha
}

fn max_weighted_omega(p: &FlixProblem, omegas: &[f64], betas: Option<&[f64]>) -> f64 {
    p.alpha()
        .as_slice()
        .iter()
        .zip(p.constants())
        .zip(omegas)
        .enumerate()
        .map(|(i, ((a, c), w))| betas.map_or(1.0, |b| b[i]) * c.l * a * a * w)
        .fold(0.0, f64::max)
}

/// `1/(L_α + 2 max{L_i α_i² ω_i}/n)`; a quarter of that when `μ_α = 0`.
pub fn dcgd_stepsize(p: &FlixProblem, omegas: &[f64]) -> f64 {
    let agg = p.aggregate_constants();
    let n = p.n() as f64;
    let denom = agg.l_alpha + 2.0 * max_weighted_omega(p, omegas, None) / n;
    if agg.mu_alpha > 0.0 {
        1.0 / denom
    } else {
        1.0 / (4.0 * denom)
    }
}

/// `(L_α + 2 max{L_i α_i² ω_i}/n + 4 max{β_i ω_i L_i α_i²}/(n min β_i))⁻¹`;
/// a quarter of that when `μ_α = 0`.
pub fn diana_stepsize(p: &FlixProblem, omegas: &[f64], betas: &[f64]) -> f64 {
    let agg = p.aggregate_constants();
    let n = p.n() as f64;
    let min_beta = betas.iter().copied().fold(f64::INFINITY, f64::min);
    let denom = agg.l_alpha
        + 2.0 * max_weighted_omega(p, omegas, None) / n
        + 4.0 * max_weighted_omega(p, omegas, Some(betas)) / (n * min_beta);
    if agg.mu_alpha > 0.0 {
        1.0 / denom
    } else {
        1.0 / (4.0 * denom)
    }
}

/// `β_i = 1/(ω_i + 1)`
pub fn default_diana_betas(specs: &[CompressorSpec]) -> Vec<f64> {
    specs.iter().map(|s| 1.0 / (s.omega() + 1.0)).collect()
}

fn initial_point(p: &FlixProblem, init: &Init) -> Result<(Vec<f64>, bool)> {
    match init {
        Init::OneShot => Ok((p.one_shot_average()?.x_avg, true)),
        Init::Point(x) => {
            if x.len() != p.dim() {
                return Err(invalid("initial point has wrong dimension"));
            }
            Ok((x.clone(), false))
        }
    }
}

fn check_specs(p: &FlixProblem, specs: &[CompressorSpec]) -> Result<()> {
    if specs.len() != p.n() {
        return Err(invalid(format!("need {} compressors, got {}", p.n(), specs.len())));
    }
    if specs.iter().any(|s| s.dim() != p.dim()) {
        return Err(invalid("compressor dimension does not match problem"));
    }
    Ok(())
}

fn resolve(mode: StepsizeMode, theoretical: impl FnOnce() -> f64) -> Result<f64> {
    let g = match mode {
        StepsizeMode::Theoretical => theoretical(),
        StepsizeMode::Manual(g) => g,
    };
    if !(g > 0.0) || !g.is_finite() {
        return Err(invalid(format!("stepsize must be positive and finite, got {g}")));
    }
    Ok(g)
}

/// Shared round loop. `direction(k, x^k, messages)` returns the server's
/// aggregated direction `g^k`, given the exact client gradient messages.
fn iterate<F>(
    p: &FlixProblem,
    opts: &RunOptions<'_>,
    x0: Vec<f64>,
    gamma: f64,
    floats_per_round: u64,
    meta: RunMeta,
    mut direction: F,
) -> Result<Trajectory>
where
    F: FnMut(usize, &[f64], Vec<Vec<f64>>) -> Result<Vec<f64>>,
{
    let d = p.dim();
    let mut x = x0.clone();
    let mut records = Vec::with_capacity(opts.rounds + 1);
    let alpha_sq_mean = p.alpha().as_slice().iter().map(|a| a * a).sum::<f64>() / p.n() as f64;
    for k in 0..=opts.rounds {
        let grads = p.client_grads(&x)?;
        let full = linalg::ordered_mean(&grads, d);
        let value = p.value(&x)?;
        if !value.is_finite() {
            return Err(FlixError::Diverged {
                round: k,
                msg: "objective is not finite".into(),
            });
        }
        let dist_sq = opts.reference.map(|xs| linalg::dist_sq(&x, xs));
        records.push(RoundRecord {
            round: k,
            value,
            grad_norm_sq: linalg::norm_sq(&full),
            dist_sq,
            // T_i(x) − T_i(x*) = α_i (x − x*)
            deploy_dist_sq: dist_sq.map(|s| alpha_sq_mean * s),
            uplink_floats: k as u64 * floats_per_round,
        });
        if k == opts.rounds {
            break;
        }
        let g = direction(k, &x, grads)?;
        linalg::axpy(-gamma, &g, &mut x);
        if !linalg::all_finite(&x) {
            return Err(FlixError::Diverged {
                round: k + 1,
                msg: format!("non-finite iterate (stepsize {gamma:e})"),
            });
        }
    }
    Ok(Trajectory {
        records,
        meta,
        x0,
        x_final: x,
    })
}

fn reject_zero_alpha(p: &FlixProblem) -> Result<()> {
    if p.alpha().is_all_zero() {
        return Err(FlixError::InvalidState(
            "all personalization weights are zero; the objective is constant".into(),
        ));
    }
    Ok(())
}

/// `x^{k+1} = x^k − (γ/n) Σ α_i ∇f_i(T_i(x^k))`, `n·d` uplink floats per round.
pub fn run_dgd(p: &FlixProblem, opts: &RunOptions<'_>) -> Result<Trajectory> {
    reject_zero_alpha(p)?;
    let gamma = resolve(opts.mode, || dgd_stepsize(p))?;
    let (x0, one_shot) = initial_point(p, &opts.init)?;
    let d = p.dim();
    let meta = RunMeta {
        algorithm: Algorithm::Dgd,
        gamma,
        mode: opts.mode,
        seed: None,
        omegas: vec![0.0; p.n()],
        betas: Vec::new(),
        one_shot_init: one_shot,
    };
    iterate(p, opts, x0, gamma, (p.n() * d) as u64, meta, |_, _, grads| {
        Ok(linalg::ordered_mean(&grads, d))
    })
}

/// Each client sends `C_i(α_i ∇f_i(T_i(x^k)))`; the server averages and steps.
pub fn run_dcgd(p: &FlixProblem, specs: &[CompressorSpec], opts: &RunOptions<'_>, seed: u64) -> Result<Trajectory> {
    reject_zero_alpha(p)?;
    check_specs(p, specs)?;
    let omegas: Vec<f64> = specs.iter().map(CompressorSpec::omega).collect();
    let gamma = resolve(opts.mode, || dcgd_stepsize(p, &omegas))?;
    let (x0, one_shot) = initial_point(p, &opts.init)?;
    let d = p.dim();
    let payload: u64 = specs.iter().map(|s| s.payload() as u64).sum();
    let meta = RunMeta {
        algorithm: Algorithm::Dcgd,
        gamma,
        mode: opts.mode,
        seed: Some(seed),
        omegas,
        betas: Vec::new(),
        one_shot_init: one_shot,
    };
    iterate(p, opts, x0, gamma, payload, meta, |k, _, grads| {
        let sent = grads
            .into_par_iter()
            .enumerate()
            .map(|(i, g)| specs[i].compress(&g, &mut client_rng(seed, i, k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(linalg::ordered_mean(&sent, d))
    })
}

/// DIANA with per-client memories; see [`DianaState`].
///
/// `β_i = 1/(ω_i + 1)` and `h_i^0 = α_i ∇f_i(T_i(x^0))`.
pub fn run_diana(p: &FlixProblem, specs: &[CompressorSpec], opts: &RunOptions<'_>, seed: u64) -> Result<Trajectory> {
    reject_zero_alpha(p)?;
    check_specs(p, specs)?;
    let omegas: Vec<f64> = specs.iter().map(CompressorSpec::omega).collect();
    let betas = default_diana_betas(specs);
    let gamma = resolve(opts.mode, || diana_stepsize(p, &omegas, &betas))?;
    let (x0, one_shot) = initial_point(p, &opts.init)?;
    let d = p.dim();
    let n = p.n() as f64;
    let payload: u64 = specs.iter().map(|s| s.payload() as u64).sum();
    let mut state = DianaState::new(p.client_grads(&x0)?, betas.clone());
    let meta = RunMeta {
        algorithm: Algorithm::Diana,
        gamma,
        mode: opts.mode,
        seed: Some(seed),
        omegas,
        betas,
        one_shot_init: one_shot,
    };
    iterate(p, opts, x0, gamma, payload, meta, |k, _, grads| {
        let deltas = grads
            .into_par_iter()
            .zip(state.memories.par_iter())
            .enumerate()
            .map(|(i, (g, h))| specs[i].compress(&linalg::sub(&g, h), &mut client_rng(seed, i, k)))
            .collect::<Result<Vec<_>>>()?;
        let mut g = state.average.clone();
        let mut h_step = vec![0.0; d];
        for (i, delta) in deltas.iter().enumerate() {
            let beta = state.betas[i];
            linalg::axpy(beta, delta, &mut state.memories[i]);
            linalg::axpy(1.0 / n, delta, &mut g);
            linalg::axpy(beta / n, delta, &mut h_step);
        }
        for (h, s) in state.average.iter_mut().zip(&h_step) {
            *h += s;
        }
        if cfg!(debug_assertions) {
            let drift = state.drift();
            let scale = linalg::norm(&state.average).max(1.0);
            if drift > 1e-10 * scale {
                return Err(FlixError::InternalConsistency(format!(
                    "memory average drifted by {drift:e} at round {k}"
                )));
            }
        }
        Ok(g)
    })
}
