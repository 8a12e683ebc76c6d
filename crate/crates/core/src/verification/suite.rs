//! The built-in desk-scale check suite behind `flix verify`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::*;
use crate::compression::{client_rng, k_sweep};
use crate::data_io::{gen_synthetic, SyntheticSpec};
use crate::flix::{population_variance, AlphaVector};
use crate::objectives::ClientObjective;
use crate::solvers::{run_dcgd, run_dgd, run_diana, RunOptions, StepsizeMode};

/// One named check: `passed` iff `measured` satisfies `bound` in the
/// direction the check describes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub bound: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CheckResult {
    fn upper(name: &str, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            passed: measured <= bound,
            measured,
            bound,
            detail: None,
        }
    }

    fn with_detail(mut self, detail: String) -> Self {
        self.detail = Some(detail);
        self
    }

    fn failed(name: &str, err: &FlixError) -> Self {
        Self {
            name: name.into(),
            passed: false,
            measured: f64::NAN,
            bound: f64::NAN,
            detail: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub schema: &'static str,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn to_json(&self) -> String {
        // NaN is not valid JSON; failed checks carry it, so map to null.
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(checks) = v.get_mut("checks").and_then(|c| c.as_array_mut()) {
            for (c, r) in checks.iter_mut().zip(&self.checks) {
                for (key, x) in [("measured", r.measured), ("bound", r.bound)] {
                    if !x.is_finite() {
                        c[key] = serde_json::Value::Null;
                    }
                }
            }
        }
        serde_json::to_string_pretty(&v).expect("report serializes") + "\n"
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Multiplier on `1/L_α` for the rate checks. Anything above 1 voids
    /// the rate guarantees; used to confirm the suite catches that.
    pub dgd_step_scale: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 2024,
            dgd_step_scale: 1.0,
        }
    }
}

pub const REPORT_SCHEMA: &str = "flix-verify/1";

/// Synthetic logistic problem shared by the rate and compression checks.
pub fn desk_logistic(seed: u64, clients: usize, dim: usize, beta: f64) -> Result<FlixProblem> {
    let objs = gen_synthetic(&SyntheticSpec::logistic(clients, dim, 60, 0.1, seed))?;
    FlixProblem::from_clients(objs, AlphaVector::uniform(clients, beta)?, 1e-12, 100_000)
}

fn desk_quadratic(seed: u64, clients: usize, dim: usize, beta: f64) -> Result<FlixProblem> {
    let objs = gen_synthetic(&SyntheticSpec::quadratic(clients, dim, 0.5, 4.0, seed))?;
    FlixProblem::from_clients(objs, AlphaVector::uniform(clients, beta)?, 1e-12, 10)
}

fn run_check(out: &mut Vec<CheckResult>, name: &str, f: impl FnOnce() -> Result<Vec<CheckResult>>) {
    match f() {
        Ok(mut v) => out.append(&mut v),
        Err(e) => out.push(CheckResult::failed(name, &e)),
    }
}

pub fn run_suite(opts: &SuiteOptions) -> VerifyReport {
    let seed = opts.seed;
    let mut checks = Vec::new();

    run_check(&mut checks, "finetune_closed_form", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let a = &m * m.transpose() + DMatrix::identity(5, 5) * 0.1;
        let b = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let x0 = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let l = a.clone().symmetric_eigen().eigenvalues.max();
        let dev = check_quad_finetune(&a, &b, &x0, 1.0 / l, 20)?;
        Ok(vec![CheckResult::upper("finetune_closed_form", dev, 1e-10)])
    });

    run_check(&mut checks, "deployed_variance", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let locals: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..10).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let base = population_variance(&locals);
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut worst: f64 = 0.0;
        for t in 0..=10 {
            let beta = t as f64 / 10.0;
            let deployed: Vec<Vec<f64>> = locals
                .iter()
                .map(|xi| xi.iter().zip(&x).map(|(l, g)| beta * g + (1.0 - beta) * l).collect())
                .collect();
            let want = (1.0 - beta).powi(2) * base;
            let got = population_variance(&deployed);
            worst = worst.max((got - want).abs() / base);
        }
        Ok(vec![CheckResult::upper("deployed_variance", worst, 1e-12)])
    });

    run_check(&mut checks, "smoothness_aggregate", || {
        let p = desk_logistic(seed, 10, 20, 0.7)?;
        let est = estimate_smoothness(&p, 200, seed)?;
        let l_alpha = p.aggregate_constants().l_alpha;
        let mut out = vec![CheckResult::upper("smoothness_aggregate", est, l_alpha * (1.0 + 1e-9))];

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let mu_alpha = p.aggregate_constants().mu_alpha;
        let mut worst = f64::INFINITY;
        let mut grad_ratio: f64 = 0.0;
        let mut fn_excess = f64::NEG_INFINITY;
        for _ in 0..100 {
            let x: Vec<f64> = (0..p.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..p.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lower = p.value(&y)?
                + linalg::dot(&p.grad(&y)?, &linalg::sub(&x, &y))
                + 0.5 * mu_alpha * linalg::dist_sq(&x, &y);
            worst = worst.min(p.value(&x)? - lower);
            let (g, gb) = gradient_local_bound(&p, &x)?;
            grad_ratio = grad_ratio.max(g / gb);
            let (f, fb) = function_local_bound(&p, &x)?;
            fn_excess = fn_excess.max(f - fb);
        }
        out.push(CheckResult {
            name: "strong_convexity_aggregate".into(),
            passed: worst >= -1e-12,
            measured: worst,
            bound: -1e-12,
            detail: Some("min over pairs of f(x) - lower model at y".into()),
        });
        out.push(CheckResult::upper("gradient_local_average", grad_ratio, 1.0 + 1e-12));
        out.push(CheckResult::upper("function_local_average", fn_excess, 1e-12));
        Ok(out)
    });

    run_check(&mut checks, "one_shot_threshold", || {
        let p = desk_quadratic(seed, 5, 6, 1.0)?;
        let sched = p.comm_budget(1e-3)?;
        let p = p.with_alpha(AlphaVector::uniform(5, sched.a)?)?;
        let x_avg = p.one_shot_average()?.x_avg;
        let x_star = quad_flix_minimizer(&p)?;
        let gap = p.value(&x_avg)? - p.value(&x_star)?;
        let mut out = vec![CheckResult::upper("one_shot_threshold", gap, 1e-3)];

        let iso = isotropic_quadratics(seed, 6, 4)?;
        let diff = linalg::max_abs_diff(&iso.one_shot_average()?.x_avg, &quad_flix_minimizer(&iso)?);
        out.push(CheckResult::upper("one_shot_isotropic", diff, 1e-10));

        let r = high_precision_optimum(&p, 1e-12)?;
        let (lhs, rhs) = average_distance_bound(&p, &r.x_star);
        out.push(CheckResult::upper("average_distance_to_optimum", lhs, rhs));
        let (lhs, rhs) = distance_to_optimum_bound(&p, &x_avg, &r.x_star);
        out.push(CheckResult::upper("distance_to_optimum", lhs, rhs));
        Ok(out)
    });

    for beta in [0.1, 0.5, 0.9] {
        let name = format!("dgd_rate_beta_{beta}");
        run_check(&mut checks, &name, || {
            let p = desk_logistic(seed, 10, 20, beta)?;
            let r = high_precision_optimum(&p, 1e-12)?;
            let step = opts.dgd_step_scale * crate::solvers::dgd_stepsize(&p);
            let t = run_dgd(&p, &RunOptions::new(StepsizeMode::Manual(step), 300))?;
            let rep = check_dgd_rate(&p, &t, &r)?;
            let mut c = CheckResult::upper(&name, rep.worst_ratio, 1.0);
            c.passed = rep.passed();
            Ok(vec![c.with_detail(match rep.first_violation() {
                Some(k) => format!("first violation at round {k}"),
                None => format!("{} rounds checked", rep.rounds_checked),
            })])
        });
    }

    run_check(&mut checks, "dcgd_floor", || {
        let p = desk_logistic(seed, 10, 20, 0.5)?;
        let r = high_precision_optimum(&p, 1e-12)?;
        let specs = vec![CompressorSpec::rand_k(2, p.dim())?; p.n()];
        let omegas: Vec<f64> = specs.iter().map(CompressorSpec::omega).collect();
        let gamma = crate::solvers::dcgd_stepsize(&p, &omegas);
        let floor = dcgd_floor(&p, &specs, gamma, &r.x_star)?;
        let opts = RunOptions::new(StepsizeMode::Theoretical, 200).with_reference(&r.x_star);
        let runs = 10;
        let mut terminal = Vec::with_capacity(runs);
        for s in 0..runs as u64 {
            let t = run_dcgd(&p, &specs, &opts, seed.wrapping_add(s))?;
            terminal.push(t.final_record().dist_sq.expect("reference supplied"));
        }
        let mean = terminal.iter().sum::<f64>() / runs as f64;
        let sd = (terminal.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (runs as f64 - 1.0)).sqrt();
        let se = sd / (runs as f64).sqrt();
        let ids = vec![CompressorSpec::identity(p.dim()); p.n()];
        let id = run_dcgd(&p, &ids, &opts, seed)?;
        let plain = run_dgd(&p, &opts)?;
        Ok(vec![
            CheckResult::upper("dcgd_floor", mean, floor + 3.0 * se),
            CheckResult {
                name: "dcgd_identity_is_dgd".into(),
                passed: id.records == plain.records,
                measured: (id.final_record().value - plain.final_record().value).abs(),
                bound: 0.0,
                detail: None,
            },
        ])
    });

    run_check(&mut checks, "diana_exact", || {
        let p = desk_logistic(seed, 10, 20, 0.5)?;
        let r = high_precision_optimum(&p, 1e-12)?;
        let specs = vec![CompressorSpec::rand_k(2, p.dim())?; p.n()];
        let t = run_diana(&p, &specs, &RunOptions::new(StepsizeMode::Theoretical, 3000), seed)?;
        let gap = t
            .records
            .iter()
            .map(|rec| rec.value - r.f_star)
            .fold(f64::INFINITY, f64::min);
        let mut out = vec![CheckResult::upper("diana_exact", gap, 1e-10)];

        let mut last = usize::MAX;
        let mut monotone = true;
        let mut hits = Vec::new();
        for k in k_sweep(p.dim(), 5) {
            let specs = vec![CompressorSpec::rand_k(k, p.dim())?; p.n()];
            let t = run_diana(&p, &specs, &RunOptions::new(StepsizeMode::Theoretical, 3000), seed)?;
            let hit = t
                .records
                .iter()
                .position(|rec| rec.value - r.f_star <= 1e-8)
                .unwrap_or(usize::MAX);
            monotone &= hit <= last;
            last = hit;
            hits.push((k, hit));
        }
        out.push(CheckResult {
            name: "diana_rounds_monotone_in_k".into(),
            passed: monotone && last != usize::MAX,
            measured: last as f64,
            bound: 3000.0,
            detail: Some(format!("(k, rounds to 1e-8): {hits:?}")),
        });
        Ok(out)
    });

    run_check(&mut checks, "rand_k_unbiased", || {
        let d = 100;
        let spec = CompressorSpec::rand_k(10, d)?;
        let mut rng = client_rng(seed, 0, 0);
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let draws = 20_000;
        let mut sum = vec![0.0; d];
        let mut sum_sq = vec![0.0; d];
        let mut err = 0.0;
        for _ in 0..draws {
            let c = spec.compress(&v, &mut rng)?;
            err += linalg::dist_sq(&c, &v);
            for j in 0..d {
                sum[j] += c[j];
                sum_sq[j] += c[j] * c[j];
            }
        }
        let nd = draws as f64;
        let mut worst_z: f64 = 0.0;
        for j in 0..d {
            let m = sum[j] / nd;
            let var = (sum_sq[j] / nd - m * m).max(0.0);
            let se = (var / nd).sqrt();
            if se > 0.0 {
                worst_z = worst_z.max((m - v[j]).abs() / se);
            }
        }
        let ratio = err / nd / linalg::norm_sq(&v);
        Ok(vec![
            CheckResult::upper("rand_k_unbiased", worst_z, 4.5)
                .with_detail("largest coordinate z-score of the empirical mean".into()),
            CheckResult::upper("rand_k_variance", ratio, spec.omega() * 1.05),
        ])
    });

    run_check(&mut checks, "budget_ladder", || {
        let mut out = Vec::new();
        let p = desk_quadratic(seed, 4, 3, 1.0)?;
        let eps = 1e-3;
        let sched = p.comm_budget(eps)?;
        let mut worst: f64 = 0.0;
        for (_, hi, comms) in sched.table().into_iter().skip(1) {
            let rounds = comms - 1;
            let q = p.with_alpha(AlphaVector::uniform(p.n(), hi)?)?;
            let f_star = q.value(&quad_flix_minimizer(&q)?)?;
            let t = run_dgd(&q, &RunOptions::new(StepsizeMode::Theoretical, rounds))?;
            worst = worst.max(t.final_record().value - f_star);
        }
        out.push(CheckResult::upper("budget_ladder", worst, eps * (1.0 + 1e-9)));
        let erm = sched.erm_rounds().max(0.0).ceil() as usize;
        out.push(CheckResult {
            name: "budget_full_weight_rounds".into(),
            passed: sched.gradient_rounds(1.0).is_some_and(|k| k <= erm.max(1)),
            measured: sched.gradient_rounds(1.0).unwrap_or(usize::MAX) as f64,
            bound: erm.max(1) as f64,
            detail: None,
        });
        Ok(out)
    });

    let passed = checks.iter().all(|c| c.passed);
    VerifyReport {
        schema: REPORT_SCHEMA,
        seed,
        passed,
        checks,
    }
}

/// Clients `f_i = (L_i/2)‖x − c_i‖²` with distinct `L_i`.
fn isotropic_quadratics(seed: u64, n: usize, d: usize) -> Result<FlixProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    let mut clients: Vec<ClientObjective> = Vec::with_capacity(n);
    for _ in 0..n {
        let l: f64 = rng.random_range(0.5..3.0);
        let c: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = DMatrix::identity(d, d) * l;
        let b = DVector::from_vec(c) * l;
        clients.push(crate::objectives::QuadraticObjective::new(a, b, 0.0)?.into());
    }
    let alpha = AlphaVector::new((0..n).map(|_| rng.random_range(0.2..1.0)).collect())?;
    FlixProblem::from_clients(clients, alpha, 1e-12, 10)
}
