//! Flat `section.key = value` experiment configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Every key must be
//! one of [`KNOWN_KEYS`]; repeating a key is an error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::compression::{k_sweep, CompressorSpec};
use crate::error::{FlixError, Result};
use crate::flix::AlphaVector;
use crate::solvers::{Algorithm, StepsizeMode};

pub const KNOWN_KEYS: &[&str] = &[
    "problem.source",
    "problem.path",
    "problem.lambda",
    "problem.machines",
    "problem.dim",
    "problem.max_rows",
    "synthetic.kind",
    "synthetic.clients",
    "synthetic.dim",
    "synthetic.per_client",
    "synthetic.mu_min",
    "synthetic.l_max",
    "synthetic.mean_shift",
    "synthetic.lambda",
    "synthetic.seed",
    "alpha.policy",
    "alpha.beta",
    "alpha.grid",
    "alpha.values",
    "run.algorithm",
    "run.compressor",
    "run.k",
    "run.k_count",
    "run.stepsize",
    "run.rounds",
    "run.seed",
    "run.local_tol",
    "run.local_max_iter",
    "run.reference_tol",
    "output.dir",
    "budget.epsilon",
    "budget.confirm",
    "verify.step_scale",
];

fn cfg_err(msg: impl Into<String>) -> FlixError {
    FlixError::Config(msg.into())
}

/// Raw key/value pairs, validated against [`KNOWN_KEYS`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {}: expected `section.key = value`", ln + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KNOWN_KEYS.contains(&k) {
                return Err(cfg_err(format!("line {}: unknown key `{k}`", ln + 1)));
            }
            if v.is_empty() {
                return Err(cfg_err(format!("line {}: empty value for `{k}`", ln + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(cfg_err(format!("line {}: duplicate key `{k}`", ln + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| cfg_err(format!("bad value for `{key}`: {v:?}"))))
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|t| {
                        t.trim()
                            .parse()
                            .map_err(|_| cfg_err(format!("bad number in `{key}`: {t:?}")))
                    })
                    .collect()
            })
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSource {
    Libsvm {
        path: PathBuf,
        lambda: f64,
        machines: usize,
        dim: Option<usize>,
        max_rows: Option<usize>,
    },
    SyntheticLogistic {
        clients: usize,
        dim: usize,
        per_client: usize,
        lambda: f64,
        mean_shift: f64,
        seed: u64,
    },
    SyntheticQuadratic {
        clients: usize,
        dim: usize,
        mu_min: f64,
        l_max: f64,
        seed: u64,
    },
}

impl ProblemSource {
    pub fn clients(&self) -> usize {
        match self {
            Self::Libsvm { machines, .. } => *machines,
            Self::SyntheticLogistic { clients, .. } | Self::SyntheticQuadratic { clients, .. } => *clients,
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            Self::Libsvm { lambda, .. } | Self::SyntheticLogistic { lambda, .. } => Some(*lambda),
            Self::SyntheticQuadratic { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AlphaPolicy {
    Scalar(f64),
    Grid(Vec<f64>),
    PerClient(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompressorChoice {
    Identity,
    RandK(usize),
    /// `k_sweep(d, count)`
    RandKSweep(usize),
}

/// A validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: ProblemSource,
    pub alpha: AlphaPolicy,
    pub algorithm: Algorithm,
    pub compressor: CompressorChoice,
    pub stepsize: StepsizeMode,
    pub rounds: usize,
    pub seed: Option<u64>,
    pub local_tol: f64,
    pub local_max_iter: usize,
    pub reference_tol: f64,
    pub out_dir: Option<PathBuf>,
    pub budget_epsilon: f64,
    pub budget_confirm: bool,
    pub verify_step_scale: f64,
}

pub const DEFAULT_ROUNDS_DGD: usize = 2_000;
pub const DEFAULT_ROUNDS_COMPRESSED: usize = 10_000;

impl RunConfig {
    pub fn from_map(m: &ConfigMap) -> Result<Self> {
        let source = match m.get("problem.source").unwrap_or("synthetic") {
            "libsvm" => {
                let path = PathBuf::from(
                    m.get("problem.path")
                        .ok_or_else(|| cfg_err("`problem.path` is required for libsvm"))?,
                );
                if !path.is_file() {
                    return Err(cfg_err(format!("dataset {} does not exist", path.display())));
                }
                ProblemSource::Libsvm {
                    path,
                    lambda: m.or("problem.lambda", 0.1)?,
                    machines: m
                        .parsed("problem.machines")?
                        .ok_or_else(|| cfg_err("`problem.machines` is required for libsvm"))?,
                    dim: m.parsed("problem.dim")?,
                    max_rows: m.parsed("problem.max_rows")?,
                }
            }
            "synthetic" => {
                let clients = m.or("synthetic.clients", 10)?;
                let dim = m.or("synthetic.dim", 20)?;
                let seed = m.or("synthetic.seed", 0)?;
                match m.get("synthetic.kind").unwrap_or("logistic") {
                    "logistic" => ProblemSource::SyntheticLogistic {
                        clients,
                        dim,
                        per_client: m.or("synthetic.per_client", 100)?,
                        lambda: m.or("synthetic.lambda", 0.1)?,
                        mean_shift: m.or("synthetic.mean_shift", 0.5)?,
                        seed,
                    },
                    "quadratic" => ProblemSource::SyntheticQuadratic {
                        clients,
                        dim,
                        mu_min: m.or("synthetic.mu_min", 0.5)?,
                        l_max: m.or("synthetic.l_max", 4.0)?,
                        seed,
                    },
                    other => return Err(cfg_err(format!("unknown synthetic.kind `{other}`"))),
                }
            }
            other => return Err(cfg_err(format!("unknown problem.source `{other}`"))),
        };
        if source.lambda().is_some_and(|l| !(l >= 0.0)) {
            return Err(cfg_err("lambda must be >= 0"));
        }
        if source.clients() == 0 {
            return Err(cfg_err("need at least one client"));
        }

        let alpha = match m.get("alpha.policy").unwrap_or("scalar") {
            "scalar" => AlphaPolicy::Scalar(m.or("alpha.beta", 1.0)?),
            "grid" => AlphaPolicy::Grid(
                m.list("alpha.grid")?
                    .ok_or_else(|| cfg_err("`alpha.grid` is required for the grid policy"))?,
            ),
            "values" => {
                let v = m
                    .list("alpha.values")?
                    .ok_or_else(|| cfg_err("`alpha.values` is required for the values policy"))?;
                if v.len() != source.clients() {
                    return Err(cfg_err(format!(
                        "`alpha.values` has {} entries for {} clients",
                        v.len(),
                        source.clients()
                    )));
                }
                AlphaPolicy::PerClient(v)
            }
            other => return Err(cfg_err(format!("unknown alpha.policy `{other}`"))),
        };
        let weights: &[f64] = match &alpha {
            AlphaPolicy::Scalar(b) => std::slice::from_ref(b),
            AlphaPolicy::Grid(g) | AlphaPolicy::PerClient(g) => g,
        };
        if weights.is_empty() {
            return Err(cfg_err("alpha grid is empty"));
        }
        if weights.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(cfg_err("personalization weights must lie in [0, 1]"));
        }

        let algorithm = match m.get("run.algorithm").unwrap_or("dgd") {
            "dgd" => Algorithm::Dgd,
            "dcgd" => Algorithm::Dcgd,
            "diana" => Algorithm::Diana,
            other => return Err(cfg_err(format!("unknown run.algorithm `{other}`"))),
        };
        let compressor = match m.get("run.compressor").unwrap_or("identity") {
            "identity" => CompressorChoice::Identity,
            "rand_k" => CompressorChoice::RandK(
                m.parsed("run.k")?
                    .ok_or_else(|| cfg_err("`run.k` is required for rand_k"))?,
            ),
            "rand_k_sweep" => {
                let c: usize = m.or("run.k_count", 7)?;
                if c < 2 {
                    return Err(cfg_err("`run.k_count` must be at least 2"));
                }
                CompressorChoice::RandKSweep(c)
            }
            other => return Err(cfg_err(format!("unknown run.compressor `{other}`"))),
        };
        if algorithm == Algorithm::Dgd && compressor != CompressorChoice::Identity {
            return Err(cfg_err(
                "dgd sends exact gradients; use dcgd or diana with a compressor",
            ));
        }
        let stepsize = match m.get("run.stepsize").unwrap_or("theoretical") {
            "theoretical" => StepsizeMode::Theoretical,
            v => {
                let g: f64 = v.parse().map_err(|_| cfg_err(format!("bad run.stepsize {v:?}")))?;
                if !(g > 0.0) || !g.is_finite() {
                    return Err(cfg_err("run.stepsize must be positive"));
                }
                StepsizeMode::Manual(g)
            }
        };
        let default_rounds = match algorithm {
            Algorithm::Dgd => DEFAULT_ROUNDS_DGD,
            _ => DEFAULT_ROUNDS_COMPRESSED,
        };
        let epsilon = m.or("budget.epsilon", 1e-3)?;
        if !(epsilon > 0.0) {
            return Err(cfg_err("budget.epsilon must be positive"));
        }
        let confirm = match m.get("budget.confirm").unwrap_or("true") {
            "true" => true,
            "false" => false,
            v => return Err(cfg_err(format!("budget.confirm must be true or false, got {v:?}"))),
        };
        Ok(Self {
            source,
            alpha,
            algorithm,
            compressor,
            stepsize,
            rounds: m.or("run.rounds", default_rounds)?,
            seed: m.parsed("run.seed")?,
            local_tol: m.or("run.local_tol", 1e-6)?,
            local_max_iter: m.or("run.local_max_iter", 100_000)?,
            reference_tol: m.or("run.reference_tol", 1e-12)?,
            out_dir: m.get("output.dir").map(PathBuf::from),
            budget_epsilon: epsilon,
            budget_confirm: confirm,
            verify_step_scale: m.or("verify.step_scale", 1.0)?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_map(&ConfigMap::load(path)?)
    }

    /// Weight vectors to sweep over, paired with the CSV `beta` summary.
    pub fn alpha_vectors(&self) -> Result<Vec<(f64, AlphaVector)>> {
        let n = self.source.clients();
        match &self.alpha {
            AlphaPolicy::Scalar(b) => Ok(vec![(*b, AlphaVector::uniform(n, *b)?)]),
            AlphaPolicy::Grid(g) => g.iter().map(|&b| Ok((b, AlphaVector::uniform(n, b)?))).collect(),
            AlphaPolicy::PerClient(v) => {
                let a = AlphaVector::new(v.clone())?;
                Ok(vec![(a.mean(), a)])
            }
        }
    }

    /// One compressor list per sweep point.
    pub fn compressor_sets(&self, d: usize) -> Result<Vec<Vec<CompressorSpec>>> {
        let n = self.source.clients();
        let ks: Vec<Option<usize>> = match self.compressor {
            CompressorChoice::Identity => vec![None],
            CompressorChoice::RandK(k) => vec![Some(k)],
            CompressorChoice::RandKSweep(c) => k_sweep(d, c).into_iter().map(Some).collect(),
        };
        ks.into_iter()
            .map(|k| {
                let spec = match k {
                    None => CompressorSpec::identity(d),
                    Some(k) => CompressorSpec::rand_k(k, d).map_err(|e| cfg_err(e.to_string()))?,
                };
                Ok(vec![spec; n])
            })
            .collect()
    }

    /// Canonical text of everything that determines the local models.
    pub fn problem_fingerprint(&self) -> String {
        let mut s = String::new();
        let _ = match &self.source {
            ProblemSource::Libsvm { path, lambda, machines, dim, max_rows } => write!(
                s,
                "libsvm path={} lambda={lambda:e} machines={machines} dim={dim:?} max_rows={max_rows:?}",
                path.display()
            ),
            ProblemSource::SyntheticLogistic { clients, dim, per_client, lambda, mean_shift, seed } => write!(
                s,
                "synthetic-logistic clients={clients} dim={dim} per_client={per_client} lambda={lambda:e} mean_shift={mean_shift:e} seed={seed}"
            ),
            ProblemSource::SyntheticQuadratic { clients, dim, mu_min, l_max, seed } => write!(
                s,
                "synthetic-quadratic clients={clients} dim={dim} mu_min={mu_min:e} l_max={l_max:e} seed={seed}"
            ),
        };
        let _ = write!(
            s,
            " local_tol={:e} local_max_iter={}",
            self.local_tol, self.local_max_iter
        );
        s
    }
}
