//! The personalized mixture objective
//! `f̃(x) = (1/n) Σ f_i(α_i x + (1 − α_i) x_i)`, its aggregated constants,
//! the one-shot weighted average of local models and the communication
//! budget ladder for equal personalization weights.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_dim, invalid, FlixError, Result};
use crate::linalg;
use crate::objectives::{ClientObjective, ObjectiveConstants};
use crate::solvers::solve_local;

/// Per-client personalization weights, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaVector(Vec<f64>);

impl AlphaVector {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(invalid("alpha vector is empty"));
        }
        if let Some(a) = alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(invalid(format!("alpha entries must lie in [0, 1], got {a}")));
        }
        Ok(Self(alpha))
    }

    pub fn uniform(n: usize, beta: f64) -> Result<Self> {
        Self::new(vec![beta; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.iter().all(|&a| a == 0.0)
    }

    /// The common value when every entry is equal.
    pub fn common(&self) -> Option<f64> {
        let first = self.0[0];
        self.0.iter().all(|&a| a == first).then_some(first)
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }
}

/// `L_α`, `μ_α` and the plain averages `L̂`, `μ̂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AggregateConstants {
    pub l_alpha: f64,
    pub mu_alpha: f64,
    pub l_hat: f64,
    pub mu_hat: f64,
}

/// One-shot average of local models and the heterogeneity constants.
#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneityConstants {
    pub x_avg: Vec<f64>,
    /// `w_i = α_i² L_i / (n L_α)`
    pub weights: Vec<f64>,
    /// Largest pairwise squared distance between local models.
    pub d: f64,
    /// `Σ w_i ‖x_i − x_avg‖²`
    pub v: f64,
}

/// Client objectives together with personalization weights and certified
/// pure local models. Immutable once built.
#[derive(Debug, Clone)]
pub struct FlixProblem {
    clients: Arc<Vec<ClientObjective>>,
    alpha: AlphaVector,
    local_models: Arc<Vec<Vec<f64>>>,
    constants: Arc<Vec<ObjectiveConstants>>,
    local_tol: f64,
}

impl FlixProblem {
    /// Assembles a problem from precomputed local models, rejecting any
    /// model whose gradient norm exceeds `local_tol`.
    pub fn new(
        clients: Vec<ClientObjective>,
        alpha: AlphaVector,
        local_models: Vec<Vec<f64>>,
        constants: Vec<ObjectiveConstants>,
        local_tol: f64,
    ) -> Result<Self> {
        let n = clients.len();
        if n == 0 {
            return Err(invalid("problem needs at least one client"));
        }
        if alpha.len() != n || local_models.len() != n || constants.len() != n {
            return Err(invalid(
                "clients, alpha, local models and constants must have equal length",
            ));
        }
        let d = clients[0].dim();
        for (i, (c, x)) in clients.iter().zip(&local_models).enumerate() {
            check_dim(&format!("client {i}"), d, c.dim())?;
            check_dim(&format!("local model {i}"), d, x.len())?;
            let g = linalg::norm(&c.grad(x)?);
            if !(g <= local_tol) {
                return Err(FlixError::InvalidState(format!(
                    "local model {i} has gradient norm {g:e} above tolerance {local_tol:e}"
                )));
            }
        }
        Ok(Self {
            clients: Arc::new(clients),
            alpha,
            local_models: Arc::new(local_models),
            constants: Arc::new(constants),
            local_tol,
        })
    }

    /// Computes constants and pure local models (gradient descent at step
    /// `1/L_i`, or a direct solve for quadratics) and assembles the problem.
    pub fn from_clients(
        clients: Vec<ClientObjective>,
        alpha: AlphaVector,
        local_tol: f64,
        max_iter: usize,
    ) -> Result<Self> {
        let constants = clients
            .par_iter()
            .map(ClientObjective::constants)
            .collect::<Result<Vec<_>>>()?;
        let local_models = clients
            .par_iter()
            .map(|c| solve_local(c, local_tol, max_iter))
            .collect::<Result<Vec<_>>>()?;
        Self::new(clients, alpha, local_models, constants, local_tol)
    }

    /// Same clients and local models under different weights.
    pub fn with_alpha(&self, alpha: AlphaVector) -> Result<Self> {
        if alpha.len() != self.n() {
            return Err(invalid("alpha length does not match client count"));
        }
        Ok(Self { alpha, ..self.clone() })
    }

    pub fn n(&self) -> usize {
        self.clients.len()
    }

    pub fn dim(&self) -> usize {
        self.clients[0].dim()
    }

    pub fn clients(&self) -> &[ClientObjective] {
        &self.clients
    }

    pub fn alpha(&self) -> &AlphaVector {
        &self.alpha
    }

    pub fn local_models(&self) -> &[Vec<f64>] {
        &self.local_models
    }

    pub fn constants(&self) -> &[ObjectiveConstants] {
        &self.constants
    }

    pub fn local_tol(&self) -> f64 {
        self.local_tol
    }

    /// `T_i(x) = α_i x + (1 − α_i) x_i`
    pub fn deploy(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let a = self.alpha.0[i];
        x.iter()
            .zip(&self.local_models[i])
            .map(|(xv, xi)| a * xv + (1.0 - a) * xi)
            .collect()
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim("flix value", self.dim(), x.len())?;
        let parts = (0..self.n())
            .into_par_iter()
            .map(|i| self.clients[i].value(&self.deploy(i, x)))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.iter().sum::<f64>() / self.n() as f64)
    }

    /// `α_i ∇f_i(T_i(x))`, the message client `i` sends in one round.
    pub fn grad_client(&self, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.clients[i].grad(&self.deploy(i, x))?;
        linalg::scale(self.alpha.0[i], &mut g);
        Ok(g)
    }

    /// All per-client gradient messages, in client order. Computed in
    /// parallel on the current rayon pool.
    pub fn client_grads(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        check_dim("flix grad", self.dim(), x.len())?;
        (0..self.n()).into_par_iter().map(|i| self.grad_client(i, x)).collect()
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(linalg::ordered_mean(&self.client_grads(x)?, self.dim()))
    }

    pub fn aggregate_constants(&self) -> AggregateConstants {
        let n = self.n() as f64;
        let (mut la, mut ma, mut lh, mut mh) = (0.0, 0.0, 0.0, 0.0);
        for (a, c) in self.alpha.0.iter().zip(self.constants.iter()) {
            la += a * a * c.l;
            ma += a * a * c.mu;
            lh += c.l;
            mh += c.mu;
        }
        AggregateConstants {
            l_alpha: la / n,
            mu_alpha: ma / n,
            l_hat: lh / n,
            mu_hat: mh / n,
        }
    }

    /// Largest pairwise squared distance between local models.
    pub fn max_pairwise_dist_sq(&self) -> f64 {
        let xs = &self.local_models;
        let mut d: f64 = 0.0;
        for i in 0..xs.len() {
            for j in i + 1..xs.len() {
                d = d.max(linalg::dist_sq(&xs[i], &xs[j]));
            }
        }
        d
    }

    fn weighted_average(&self, weights: Vec<f64>) -> HeterogeneityConstants {
        let mut x_avg = vec![0.0; self.dim()];
        for (w, x) in weights.iter().zip(self.local_models.iter()) {
            linalg::axpy(*w, x, &mut x_avg);
        }
        let v = weights
            .iter()
            .zip(self.local_models.iter())
            .map(|(w, x)| w * linalg::dist_sq(x, &x_avg))
            .sum();
        HeterogeneityConstants {
            x_avg,
            weights,
            d: self.max_pairwise_dist_sq(),
            v,
        }
    }

    /// `x_avg = Σ w_i x_i` with `w_i = α_i² L_i / (n L_α)`, plus `D` and `V`.
    pub fn one_shot_average(&self) -> Result<HeterogeneityConstants> {
        if self.alpha.is_all_zero() {
            return Err(FlixError::InvalidState(
                "all personalization weights are zero; averaging weights undefined".into(),
            ));
        }
        let n = self.n() as f64;
        let l_alpha = self.aggregate_constants().l_alpha;
        let weights = self
            .alpha
            .0
            .iter()
            .zip(self.constants.iter())
            .map(|(a, c)| a * a * c.l / (n * l_alpha))
            .collect();
        Ok(self.weighted_average(weights))
    }

    /// Population variance of the deployed models `T_1(x), …, T_n(x)`.
    pub fn deployed_variance(&self, x: &[f64]) -> f64 {
        let deployed: Vec<Vec<f64>> = (0..self.n()).map(|i| self.deploy(i, x)).collect();
        population_variance(&deployed)
    }

    /// Communication ladder for equal weights; see [`BudgetSchedule`].
    ///
    /// The ladder depends only on the local models and constants, so the
    /// current weights only need to be equal, not any particular value.
    pub fn comm_budget(&self, epsilon: f64) -> Result<BudgetSchedule> {
        if !(epsilon > 0.0) {
            return Err(invalid("epsilon must be positive"));
        }
        if self.alpha.common().is_none() {
            return Err(FlixError::Unsupported(
                "the communication ladder needs equal personalization weights".into(),
            ));
        }
        let agg = self.aggregate_constants();
        if !(agg.mu_hat > 0.0) {
            return Err(FlixError::Unsupported(
                "communication ladder needs strongly convex clients (mean mu > 0)".into(),
            ));
        }
        let total_l: f64 = self.constants.iter().map(|c| c.l).sum();
        let h = self.weighted_average(self.constants.iter().map(|c| c.l / total_l).collect());
        let a = (2.0 * epsilon / (agg.l_hat * h.v)).sqrt();
        let ratio = agg.mu_hat / agg.l_hat;
        let q = if ratio >= 1.0 {
            f64::INFINITY
        } else {
            1.0 / (1.0 - ratio).sqrt()
        };
        Ok(BudgetSchedule {
            epsilon,
            a,
            q,
            l_hat: agg.l_hat,
            mu_hat: agg.mu_hat,
            v: h.v,
            d: h.d,
            heterogeneous_threshold: (2.0 * epsilon).sqrt() / (agg.l_hat * h.d).sqrt(),
        })
    }
}

/// `(1/n) Σ ‖y_i − ȳ‖²`
pub fn population_variance(ys: &[Vec<f64>]) -> f64 {
    let d = ys.first().map(Vec::len).unwrap_or(0);
    let mean = linalg::ordered_mean(ys, d);
    ys.iter().map(|y| linalg::dist_sq(y, &mean)).sum::<f64>() / ys.len() as f64
}

/// Minimum number of communications needed to reach accuracy `epsilon`
/// as a function of the common personalization weight `β`.
///
/// With `A = √(2ε/(L̂V))` and `q = 1/√(1 − μ̂/L̂)`: `β = 0` needs none,
/// `β ≤ A` needs one (the weighted average), and `A q^{k−1} < β ≤ A q^k`
/// needs `k + 1` (the average followed by `k` gradient rounds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BudgetSchedule {
    pub epsilon: f64,
    pub a: f64,
    /// Infinite when `μ̂ = L̂`, where one gradient round is exact.
    pub q: f64,
    pub l_hat: f64,
    pub mu_hat: f64,
    pub v: f64,
    pub d: f64,
    /// `√(2ε)/√(L̂D)`, sufficient for one-shot averaging with arbitrary weights.
    pub heterogeneous_threshold: f64,
}

impl BudgetSchedule {
    /// Gradient rounds after the averaging step needed at weight `beta`.
    pub fn gradient_rounds(&self, beta: f64) -> Option<usize> {
        if beta <= self.a {
            return Some(0);
        }
        if self.q.is_infinite() {
            return Some(1);
        }
        // smallest k with beta <= A q^k
        let mut k = ((beta / self.a).ln() / self.q.ln()).ceil().max(1.0) as usize;
        while k > 1 && beta <= self.a * self.q.powi(k as i32 - 1) {
            k -= 1;
        }
        while beta > self.a * self.q.powi(k as i32) {
            k += 1;
        }
        Some(k)
    }

    pub fn communications(&self, beta: f64) -> usize {
        if beta == 0.0 {
            return 0;
        }
        1 + self.gradient_rounds(beta).unwrap_or(0)
    }

    /// Upper end of the `β` interval served by `k + 1` communications.
    pub fn rung_upper(&self, k: usize) -> f64 {
        if k == 0 {
            self.a
        } else if self.q.is_infinite() {
            f64::INFINITY
        } else {
            self.a * self.q.powi(k as i32)
        }
    }

    /// `(L̂/μ̂)·log(L̂V/(2ε))`, the gradient-descent round count at `β = 1`.
    pub fn erm_rounds(&self) -> f64 {
        (self.l_hat / self.mu_hat) * (self.l_hat * self.v / (2.0 * self.epsilon)).ln()
    }

    /// `(β interval, communications)` rows covering `(0, 1]`.
    pub fn table(&self) -> Vec<(f64, f64, usize)> {
        let mut rows = vec![(0.0, 0.0, 0)];
        let mut lo = 0.0;
        let mut k = 0;
        while lo < 1.0 {
            let hi = self.rung_upper(k).min(1.0);
            rows.push((lo, hi, k + 1));
            lo = hi;
            k += 1;
        }
        rows
    }
}
