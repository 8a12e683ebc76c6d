//! Experiment commands behind the `flix` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ProblemSource, RunConfig};
use crate::data_io::{gen_synthetic, logistic_clients, parse_libsvm, SyntheticSpec};
use crate::error::{FlixError, Result};
use crate::flix::{AlphaVector, BudgetSchedule, FlixProblem};
use crate::linalg;
use crate::objectives::{ClientObjective, ObjectiveConstants};
use crate::solvers::{run_dcgd, run_dgd, run_diana, solve_local, Algorithm, RunOptions, StepsizeMode, Trajectory};
use crate::verification::suite::{run_suite, SuiteOptions, VerifyReport};
use crate::verification::{high_precision_optimum, ROUNDOFF_SLACK};

pub const CSV_HEADER: &str = "run_id,algorithm,beta,k,round,loss_gap,grad_norm_sq,avg_deploy_dist_sq,uplink_kfloats";
pub const BUNDLE_MAGIC: &str = "flix-local-models v1";
pub const BUNDLE_FILE: &str = "local_models.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "verify_report.json";
pub const BUDGET_FILE: &str = "budget.txt";
pub const DEFAULT_OUT_DIR: &str = "flix-out";
pub const DEFAULT_VERIFY_SEED: u64 = 2024;

/// Command-line overrides shared by all commands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl Overrides {
    fn out_dir(&self, cfg: Option<&RunConfig>) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the global
/// pool when `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| FlixError::Config(format!("cannot start {n} threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// `{:.16e}`: 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn build_clients(cfg: &RunConfig) -> Result<Vec<ClientObjective>> {
    match &cfg.source {
        ProblemSource::Libsvm {
            path,
            lambda,
            machines,
            dim,
            max_rows,
        } => {
            let text = fs::read_to_string(path)
                .map_err(|e| FlixError::Config(format!("cannot read {}: {e}", path.display())))?;
            let mut ds = parse_libsvm(&text, *dim)?;
            if let Some(r) = max_rows {
                ds = ds.slice(0..(*r).min(ds.len()));
            }
            logistic_clients(&ds, *machines, *lambda).map_err(|e| match e {
                FlixError::InvalidArgument(m) => FlixError::Config(m),
                e => e,
            })
        }
        ProblemSource::SyntheticLogistic {
            clients,
            dim,
            per_client,
            lambda,
            mean_shift,
            seed,
        } => {
            let mut spec = SyntheticSpec::logistic(*clients, *dim, *per_client, *lambda, *seed);
            spec.mean_shift = *mean_shift;
            gen_synthetic(&spec)
        }
        ProblemSource::SyntheticQuadratic {
            clients,
            dim,
            mu_min,
            l_max,
            seed,
        } => gen_synthetic(&SyntheticSpec::quadratic(*clients, *dim, *mu_min, *l_max, *seed)),
    }
}

/// Local models, constants and their gradient certificates.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalBundle {
    pub fingerprint: String,
    pub models: Vec<Vec<f64>>,
    pub constants: Vec<ObjectiveConstants>,
    pub certificates: Vec<f64>,
}

impl LocalBundle {
    pub fn compute(cfg: &RunConfig, clients: &[ClientObjective]) -> Result<Self> {
        let solved = clients
            .par_iter()
            .map(|c| {
                let k = c.constants()?;
                let x = solve_local(c, cfg.local_tol, cfg.local_max_iter)?;
                let cert = linalg::norm(&c.grad(&x)?);
                Ok((x, k, cert))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut b = Self {
            fingerprint: cfg.problem_fingerprint(),
            models: Vec::new(),
            constants: Vec::new(),
            certificates: Vec::new(),
        };
        for (x, k, c) in solved {
            b.models.push(x);
            b.constants.push(k);
            b.certificates.push(c);
        }
        Ok(b)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = self.models.first().map_or(0, Vec::len);
        let _ = writeln!(s, "{BUNDLE_MAGIC}");
        let _ = writeln!(s, "problem {}", self.fingerprint);
        let _ = writeln!(s, "clients {}", self.models.len());
        let _ = writeln!(s, "dim {d}");
        for (i, ((x, k), c)) in self
            .models
            .iter()
            .zip(&self.constants)
            .zip(&self.certificates)
            .enumerate()
        {
            let _ = writeln!(s, "client {i} L={:e} mu={:e} cert={:e}", k.l, k.mu, c);
            let xs: Vec<String> = x.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "x {}", xs.join(" "));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| FlixError::Parse {
            line,
            msg: msg.to_string(),
        };
        let lines: Vec<&str> = text.lines().collect();
        if lines.first() != Some(&BUNDLE_MAGIC) {
            return Err(bad(1, "not a local-model bundle"));
        }
        let field = |i: usize, key: &str| -> Result<&str> {
            lines
                .get(i)
                .and_then(|l| l.strip_prefix(key))
                .and_then(|l| l.strip_prefix(' '))
                .ok_or_else(|| bad(i + 1, &format!("expected `{key}`")))
        };
        let fingerprint = field(1, "problem")?.to_string();
        let n: usize = field(2, "clients")?.parse().map_err(|_| bad(3, "bad client count"))?;
        let d: usize = field(3, "dim")?.parse().map_err(|_| bad(4, "bad dimension"))?;
        let num = |line: usize, t: &str| -> Result<f64> { t.parse().map_err(|_| bad(line, "bad number")) };
        let mut b = Self {
            fingerprint,
            models: Vec::new(),
            constants: Vec::new(),
            certificates: Vec::new(),
        };
        for i in 0..n {
            let hl = 4 + 2 * i;
            let head: Vec<&str> = field(hl, "client")?.split_whitespace().collect();
            let get = |key: &str| -> Result<f64> {
                let t = head
                    .iter()
                    .find_map(|t| t.strip_prefix(key))
                    .ok_or_else(|| bad(hl + 1, &format!("missing {key}")))?;
                num(hl + 1, t)
            };
            let k = ObjectiveConstants::new(get("L=")?, get("mu=")?)?;
            let cert = get("cert=")?;
            let x = field(hl + 1, "x")?
                .split_whitespace()
                .map(|t| num(hl + 2, t))
                .collect::<Result<Vec<f64>>>()?;
            if x.len() != d {
                return Err(bad(hl + 2, "local model has wrong length"));
            }
            b.models.push(x);
            b.constants.push(k);
            b.certificates.push(cert);
        }
        Ok(b)
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let res = fs::write(&tmp, contents).and_then(|_| fs::rename(&tmp, path));
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}

/// Solves every client locally and writes the bundle to `out/local_models.txt`.
///
/// On failure nothing is left behind.
pub fn cmd_precompute_local(cfg: &RunConfig, ov: &Overrides) -> Result<PathBuf> {
    let out = ov.out_dir(Some(cfg));
    fs::create_dir_all(&out)?;
    let path = out.join(BUNDLE_FILE);
    let clients = build_clients(cfg)?;
    let bundle = match LocalBundle::compute(cfg, &clients) {
        Ok(b) => b,
        Err(e) => {
            let _ = fs::remove_file(&path);
            return Err(e);
        }
    };
    write_atomic(&path, &bundle.to_text())?;
    Ok(path)
}

/// Builds the problem at weights `alpha`, reusing a matching bundle in
/// `out` if one exists.
pub fn load_problem(cfg: &RunConfig, out: &Path, alpha: AlphaVector) -> Result<FlixProblem> {
    let clients = build_clients(cfg)?;
    let cached = fs::read_to_string(out.join(BUNDLE_FILE))
        .ok()
        .and_then(|t| LocalBundle::parse(&t).ok())
        .filter(|b| b.fingerprint == cfg.problem_fingerprint() && b.models.len() == clients.len());
    let bundle = match cached {
        Some(b) => b,
        None => LocalBundle::compute(cfg, &clients)?,
    };
    FlixProblem::new(clients, alpha, bundle.models, bundle.constants, cfg.local_tol)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunEntry {
    pub run_id: String,
    pub file: Option<String>,
    pub algorithm: &'static str,
    pub beta: f64,
    pub k: usize,
    pub status: &'static str,
    pub error: Option<String>,
    pub gamma: Option<f64>,
    pub rows: usize,
    pub f_star: Option<f64>,
    pub optimum_certificate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub schema: &'static str,
    pub problem: String,
    pub seed: u64,
    pub rounds: usize,
    pub stepsize: String,
    pub initial_point: &'static str,
    pub clients: usize,
    pub dim: usize,
    pub l_hat: f64,
    pub mu_hat: f64,
    /// `L̂/λ` for regularized logistic problems.
    pub kappa: Option<f64>,
    pub runs: Vec<RunEntry>,
}

impl Manifest {
    pub fn failed(&self) -> usize {
        self.runs.iter().filter(|r| r.status != "ok").count()
    }
}

pub fn metrics_csv(run_id: &str, beta: f64, k: usize, f_star: f64, t: &Trajectory) -> String {
    let mut s = String::with_capacity(128 * (t.records.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in &t.records {
        let _ = writeln!(
            s,
            "{run_id},{},{},{k},{},{},{},{},{}",
            t.meta.algorithm.name(),
            fmt17(beta),
            r.round,
            fmt17(r.value - f_star),
            fmt17(r.grad_norm_sq),
            fmt17(r.deploy_dist_sq.unwrap_or(f64::NAN)),
            fmt17(r.uplink_floats as f64 / 1000.0),
        );
    }
    s
}

fn stepsize_label(m: StepsizeMode) -> String {
    match m {
        StepsizeMode::Theoretical => "theoretical".into(),
        StepsizeMode::Manual(g) => format!("{g:e}"),
    }
}

/// Removes the CSVs listed by a previous manifest in `out`.
fn clear_previous_run(out: &Path) {
    let Ok(text) = fs::read_to_string(out.join(MANIFEST_FILE)) else {
        return;
    };
    let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) else {
        return;
    };
    for run in v["runs"].as_array().into_iter().flatten() {
        if let Some(f) = run["file"].as_str() {
            if !f.contains('/') && !f.contains('\\') && f.ends_with(".csv") {
                let _ = fs::remove_file(out.join(f));
            }
        }
    }
}

/// Executes the weight-grid × compressor-grid sweep, writing one CSV per
/// run and `manifest.json`. Failed runs are recorded and skipped.
pub fn cmd_run(cfg: &RunConfig, ov: &Overrides) -> Result<Manifest> {
    let seed = ov
        .seed
        .or(cfg.seed)
        .ok_or_else(|| FlixError::Config("a master seed is required (`run.seed` or --seed)".into()))?;
    let out = ov.out_dir(Some(cfg));
    fs::create_dir_all(&out)?;
    let alphas = cfg.alpha_vectors()?;
    let base = load_problem(cfg, &out, alphas[0].1.clone())?;
    let specs_grid = cfg.compressor_sets(base.dim())?;
    let agg = base.aggregate_constants();
    clear_previous_run(&out);

    let mut runs = Vec::new();
    for (ai, (beta, alpha)) in alphas.iter().enumerate() {
        let p = base.with_alpha(alpha.clone())?;
        let reference = high_precision_optimum(&p, cfg.reference_tol);
        for specs in &specs_grid {
            let k = specs[0].k();
            let run_id = format!("{}-a{ai:02}-k{k}", cfg.algorithm.name());
            let mut entry = RunEntry {
                run_id: run_id.clone(),
                file: None,
                algorithm: cfg.algorithm.name(),
                beta: *beta,
                k,
                status: "ok",
                error: None,
                gamma: None,
                rows: 0,
                f_star: None,
                optimum_certificate: None,
            };
            let result = reference.as_ref().map_err(clone_err).and_then(|r| {
                let opts = RunOptions::new(cfg.stepsize, cfg.rounds).with_reference(&r.x_star);
                let t = match cfg.algorithm {
                    Algorithm::Dgd => run_dgd(&p, &opts),
                    Algorithm::Dcgd => run_dcgd(&p, specs, &opts, seed),
                    Algorithm::Diana => run_diana(&p, specs, &opts, seed),
                }?;
                Ok((r, t))
            });
            match result {
                Ok((r, t)) => {
                    let file = format!("{run_id}.csv");
                    fs::write(out.join(&file), metrics_csv(&run_id, *beta, k, r.f_star, &t))?;
                    entry.file = Some(file);
                    entry.gamma = Some(t.meta.gamma);
                    entry.rows = t.records.len();
                    entry.f_star = Some(r.f_star);
                    entry.optimum_certificate = Some(r.certificate);
                }
                Err(e) => {
                    entry.status = match e {
                        FlixError::Diverged { .. } => "diverged",
                        _ => "failed",
                    };
                    entry.error = Some(e.to_string());
                }
            }
            runs.push(entry);
        }
    }

    let manifest = Manifest {
        schema: "flix-manifest/1",
        problem: cfg.problem_fingerprint(),
        seed,
        rounds: cfg.rounds,
        stepsize: stepsize_label(cfg.stepsize),
        initial_point: "one_shot_average",
        clients: base.n(),
        dim: base.dim(),
        l_hat: agg.l_hat,
        mu_hat: agg.mu_hat,
        kappa: cfg.source.lambda().filter(|l| *l > 0.0).map(|l| agg.l_hat / l),
        runs,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| FlixError::InternalConsistency(e.to_string()))?;
    write_atomic(&out.join(MANIFEST_FILE), &(json + "\n"))?;
    Ok(manifest)
}

fn clone_err(e: &FlixError) -> FlixError {
    match e {
        FlixError::InvalidState(m) => FlixError::InvalidState(m.clone()),
        FlixError::ConvergenceFailure { iterations, grad_norm } => FlixError::ConvergenceFailure {
            iterations: *iterations,
            grad_norm: *grad_norm,
        },
        other => FlixError::InvalidState(other.to_string()),
    }
}

/// Runs the built-in check suite and writes `verify_report.json`.
pub fn cmd_verify(cfg: Option<&RunConfig>, ov: &Overrides) -> Result<VerifyReport> {
    let seed = ov.seed.or(cfg.and_then(|c| c.seed)).unwrap_or(DEFAULT_VERIFY_SEED);
    let scale = cfg.map_or(1.0, |c| c.verify_step_scale);
    let report = run_suite(&SuiteOptions {
        seed,
        dgd_step_scale: scale,
    });
    let out = ov.out_dir(cfg);
    fs::create_dir_all(&out)?;
    write_atomic(&out.join(REPORT_FILE), &report.to_json())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetRow {
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub communications: usize,
    /// Loss gap after the promised communications at `beta_hi`.
    pub confirmed_gap: Option<f64>,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetReport {
    pub schedule: BudgetSchedule,
    pub full_weight_rounds: f64,
    pub rows: Vec<BudgetRow>,
}

impl BudgetReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.ok)
    }

    pub fn render(&self) -> String {
        let s = &self.schedule;
        let mut t = String::new();
        let _ = writeln!(t, "epsilon = {:e}", s.epsilon);
        let _ = writeln!(t, "A = {:e}", s.a);
        let _ = writeln!(t, "q = {:e}", s.q);
        let _ = writeln!(
            t,
            "L_hat = {:e}  mu_hat = {:e}  V = {:e}  D = {:e}",
            s.l_hat, s.mu_hat, s.v, s.d
        );
        let _ = writeln!(t, "heterogeneous one-shot threshold = {:e}", s.heterogeneous_threshold);
        let _ = writeln!(t, "full-weight gradient rounds >= {:e}", self.full_weight_rounds);
        let _ = writeln!(t, "beta_lo\tbeta_hi\tcommunications\tconfirmed_gap\tok");
        for r in &self.rows {
            let gap = r.confirmed_gap.map_or("-".to_string(), |g| format!("{g:e}"));
            let _ = writeln!(
                t,
                "{:e}\t{:e}\t{}\t{gap}\t{}",
                r.beta_lo, r.beta_hi, r.communications, r.ok
            );
        }
        t
    }
}

/// Schedule for the configured clients at accuracy `epsilon`, with an
/// optional gradient-descent confirmation at the top of every rung.
pub fn budget_report(p: &FlixProblem, epsilon: f64, confirm: bool, reference_tol: f64) -> Result<BudgetReport> {
    let sched = p.comm_budget(epsilon)?;
    let mut rows = Vec::new();
    for (lo, hi, comms) in sched.table() {
        let mut row = BudgetRow {
            beta_lo: lo,
            beta_hi: hi,
            communications: comms,
            confirmed_gap: None,
            ok: true,
        };
        if confirm && comms > 0 {
            let q = p.with_alpha(AlphaVector::uniform(p.n(), hi)?)?;
            let r = high_precision_optimum(&q, reference_tol)?;
            let t = run_dgd(&q, &RunOptions::new(StepsizeMode::Theoretical, comms - 1))?;
            let gap = t.final_record().value - r.f_star;
            row.ok = gap <= epsilon + ROUNDOFF_SLACK * r.f_star.abs().max(1.0);
            row.confirmed_gap = Some(gap);
        }
        rows.push(row);
    }
    Ok(BudgetReport {
        schedule: sched,
        full_weight_rounds: sched.erm_rounds(),
        rows,
    })
}

/// Communication ladder for the configured problem. The weights must be
/// equal across clients; their value does not affect the ladder.
pub fn cmd_budget(cfg: &RunConfig, ov: &Overrides) -> Result<BudgetReport> {
    if matches!(cfg.alpha, crate::config::AlphaPolicy::PerClient(_)) {
        return Err(FlixError::Unsupported(
            "the communication ladder needs equal weights".into(),
        ));
    }
    let out = ov.out_dir(Some(cfg));
    let p = load_problem(cfg, &out, AlphaVector::uniform(cfg.source.clients(), 1.0)?)?;
    let report = budget_report(&p, cfg.budget_epsilon, cfg.budget_confirm, cfg.reference_tol)?;
    if ov.out.is_some() || cfg.out_dir.is_some() {
        fs::create_dir_all(&out)?;
        write_atomic(&out.join(BUDGET_FILE), &report.render())?;
    }
    Ok(report)
}
