//! Client loss functions: L2-regularized logistic regression over
//! label-folded rows, and strongly convex quadratics.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, invalid, Result};
use crate::linalg::{self, PowerIterOptions};

/// Row-major sparse matrix of signed feature rows `a_{i,j}`.
///
/// Labels are already folded into the rows, so a row is `y_j * feature_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBlock {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl DataBlock {
    /// Builds a block from sparse rows given as `(column, value)` pairs with
    /// 0-based columns.
    pub fn from_sparse_rows(dim: usize, rows: &[Vec<(usize, f64)>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid("data block needs at least one row"));
        }
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for (r, row) in rows.iter().enumerate() {
            for &(c, v) in row {
                if c >= dim {
                    return Err(invalid(format!("row {r}: column {c} outside dimension {dim}")));
                }
                if !v.is_finite() {
                    return Err(invalid(format!("row {r}: non-finite entry")));
                }
                if v != 0.0 {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            dim,
            row_ptr,
            cols,
            vals,
        })
    }

    pub fn from_dense_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        let sparse: Vec<Vec<(usize, f64)>> = rows
            .iter()
            .map(|r| {
                if r.len() != dim {
                    return Err(invalid("ragged dense rows"));
                }
                Ok(r.iter().copied().enumerate().collect())
            })
            .collect::<Result<_>>()?;
        Self::from_sparse_rows(dim, &sparse)
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.row_ptr[j], self.row_ptr[j + 1]);
        self.cols[s..e].iter().copied().zip(self.vals[s..e].iter().copied())
    }

    pub fn row_dot(&self, j: usize, x: &[f64]) -> f64 {
        self.row(j).map(|(c, v)| v * x[c]).sum()
    }

    pub fn row_axpy(&self, j: usize, a: f64, out: &mut [f64]) {
        for (c, v) in self.row(j) {
            out[c] += a * v;
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.rows())
            .map(|j| {
                let mut r = vec![0.0; self.dim];
                for (c, v) in self.row(j) {
                    r[c] = v;
                }
                r
            })
            .collect()
    }

    /// `out = Σ_j a_j a_jᵀ v` without forming the Gram matrix.
    pub fn gram_apply(&self, v: &[f64], out: &mut [f64]) {
        for j in 0..self.rows() {
            let t = self.row_dot(j, v);
            self.row_axpy(j, t, out);
        }
    }
}

/// Smoothness and strong-convexity constants of one objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConstants {
    pub l: f64,
    pub mu: f64,
}

impl ObjectiveConstants {
    pub fn new(l: f64, mu: f64) -> Result<Self> {
        if !(l > 0.0) || !(mu >= 0.0) || mu > l {
            return Err(invalid(format!("constants need 0 <= mu <= L, L > 0 (L={l}, mu={mu})")));
        }
        Ok(Self { l, mu })
    }
}

/// `f(x) = (1/k) Σ_j log(1 + exp(-a_jᵀx)) + (λ/2)‖x‖²`
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticObjective {
    data: DataBlock,
    lambda: f64,
}

/// `log(1 + exp(-t))` evaluated without overflow.
fn softplus_neg(t: f64) -> f64 {
    if t >= 0.0 {
        (-t).exp().ln_1p()
    } else {
        -t + t.exp().ln_1p()
    }
}

/// `σ(-t) = 1 / (1 + exp(t))`
fn sigmoid_neg(t: f64) -> f64 {
    if t >= 0.0 {
        let e = (-t).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + t.exp())
    }
}

impl LogisticObjective {
    pub fn new(data: DataBlock, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(invalid(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(Self { data, lambda })
    }

    pub fn data(&self) -> &DataBlock {
        &self.data
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim("logistic value", self.data.dim(), x.len())?;
        let k = self.data.rows();
        let loss: f64 = (0..k).map(|j| softplus_neg(self.data.row_dot(j, x))).sum();
        Ok(loss / k as f64 + 0.5 * self.lambda * linalg::norm_sq(x))
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("logistic grad", self.data.dim(), x.len())?;
        let k = self.data.rows();
        let mut g = vec![0.0; x.len()];
        let inv_k = 1.0 / k as f64;
        for j in 0..k {
            let s = sigmoid_neg(self.data.row_dot(j, x));
            self.data.row_axpy(j, -s * inv_k, &mut g);
        }
        linalg::axpy(self.lambda, x, &mut g);
        Ok(g)
    }

    /// `L = λ_max(Σ a aᵀ)/(4k) + λ`, `μ = λ`.
    ///
    /// The top eigenvalue comes from power iteration on the implicit Gram
    /// operator (relative tolerance 1e-9, at most 10 000 iterations).
    pub fn constants(&self) -> Result<ObjectiveConstants> {
        let k = self.data.rows() as f64;
        let top = linalg::power_iteration(self.data.dim(), PowerIterOptions::default(), |v, out| {
            self.data.gram_apply(v, out)
        })?;
        let l = top / (4.0 * k) + self.lambda;
        if l <= 0.0 {
            return Err(invalid("logistic objective with zero data and lambda = 0 is constant"));
        }
        ObjectiveConstants::new(l, self.lambda)
    }
}

/// `f(x) = ½ xᵀAx − bᵀx + c` with symmetric positive definite `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
    minimizer: Vec<f64>,
    constants: ObjectiveConstants,
}

impl QuadraticObjective {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: f64) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d || b.len() != d || d == 0 {
            return Err(invalid("quadratic needs square A and matching b"));
        }
        let scale = a.amax().max(f64::MIN_POSITIVE);
        if (&a - a.transpose()).amax() > 1e-12 * scale {
            return Err(invalid("quadratic matrix A is not symmetric"));
        }
        let chol = Cholesky::new(a.clone()).ok_or_else(|| invalid("quadratic matrix A is not positive definite"))?;
        let minimizer = chol.solve(&b).iter().copied().collect();
        let eig = SymmetricEigen::new(a.clone());
        let l = eig.eigenvalues.max();
        let mu = eig.eigenvalues.min();
        if !(mu > 0.0) {
            return Err(invalid("quadratic matrix A is not positive definite"));
        }
        let constants = ObjectiveConstants::new(l, mu)?;
        Ok(Self {
            a,
            b,
            c,
            minimizer,
            constants,
        })
    }

    pub fn from_rows(a: &[Vec<f64>], b: &[f64], c: f64) -> Result<Self> {
        let d = b.len();
        let m = DMatrix::from_fn(d, d, |i, j| a[i][j]);
        Self::new(m, DVector::from_column_slice(b), c)
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn offset(&self) -> f64 {
        self.c
    }

    /// Exact minimizer `A⁻¹b` from a Cholesky solve.
    pub fn minimizer(&self) -> &[f64] {
        &self.minimizer
    }

    pub fn constants(&self) -> ObjectiveConstants {
        self.constants
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim("quadratic value", self.dim(), x.len())?;
        let xv = DVector::from_column_slice(x);
        Ok(0.5 * xv.dot(&(&self.a * &xv)) - self.b.dot(&xv) + self.c)
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("quadratic grad", self.dim(), x.len())?;
        let xv = DVector::from_column_slice(x);
        Ok((&self.a * xv - &self.b).iter().copied().collect())
    }

    /// Value, gradient and exact minimizer in one call.
    pub fn value_grad_min(&self, x: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        Ok((self.value(x)?, self.grad(x)?, self.minimizer.clone()))
    }
}

/// A client's loss function.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientObjective {
    Logistic(LogisticObjective),
    Quadratic(QuadraticObjective),
}

impl ClientObjective {
    pub fn dim(&self) -> usize {
        match self {
            Self::Logistic(o) => o.data().dim(),
            Self::Quadratic(o) => o.dim(),
        }
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        match self {
            Self::Logistic(o) => o.value(x),
            Self::Quadratic(o) => o.value(x),
        }
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Logistic(o) => o.grad(x),
            Self::Quadratic(o) => o.grad(x),
        }
    }

    pub fn constants(&self) -> Result<ObjectiveConstants> {
        match self {
            Self::Logistic(o) => o.constants(),
            Self::Quadratic(o) => Ok(o.constants()),
        }
    }

    pub fn as_quadratic(&self) -> Option<&QuadraticObjective> {
        match self {
            Self::Quadratic(q) => Some(q),
            Self::Logistic(_) => None,
        }
    }
}

impl From<LogisticObjective> for ClientObjective {
    fn from(o: LogisticObjective) -> Self {
        Self::Logistic(o)
    }
}

impl From<QuadraticObjective> for ClientObjective {
    fn from(o: QuadraticObjective) -> Self {
        Self::Quadratic(o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logistic(rows: &[Vec<f64>], lambda: f64) -> LogisticObjective {
        LogisticObjective::new(DataBlock::from_dense_rows(rows).unwrap(), lambda).unwrap()
    }

    fn random_logistic(d: usize, k: usize, seed: u64, lambda: f64) -> LogisticObjective {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.5)).collect())
            .collect();
        logistic(&rows, lambda)
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn logistic_value_examples() {
        let o = logistic(&[vec![0.0, 0.0]], 0.0);
        assert!((o.value(&[3.0, -7.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let o = logistic(&[vec![1.0]], 0.1);
        assert!((o.value(&[0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        // log(1 + e^-1) + 0.05 from a 40-digit evaluation.
        assert!((o.value(&[1.0]).unwrap() - 0.363_261_687_518_222_8).abs() < 1e-15);
    }

    #[test]
    fn logistic_value_is_stable_for_large_margins() {
        let o = logistic(&[vec![1.0]], 0.0);
        assert!((o.value(&[-800.0]).unwrap() - 800.0).abs() < 1e-9);
        assert!(o.value(&[800.0]).unwrap() >= 0.0);
        assert!(o.grad(&[-800.0]).unwrap()[0].is_finite());
    }

    #[test]
    fn logistic_grad_examples() {
        let o = logistic(&[vec![2.0, 0.0]], 0.0);
        assert_eq!(o.grad(&[0.0, 0.0]).unwrap(), vec![-1.0, 0.0]);

        let rows = vec![vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 1.0], vec![-1.0, 1.0, 1.0]];
        let o = logistic(&rows, 0.7);
        let g = o.grad(&[0.0; 3]).unwrap();
        for c in 0..3 {
            let expect = -rows.iter().map(|r| r[c]).sum::<f64>() / (2.0 * 3.0);
            assert!((g[c] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn logistic_grad_matches_finite_difference() {
        let o = random_logistic(5, 20, 7, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for _ in 0..10 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g = o.grad(&x).unwrap();
            let fd = central_diff(|z| o.value(z).unwrap(), &x, 1e-6);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let o = logistic(&[vec![1.0, 2.0]], 0.1);
        assert!(o.value(&[1.0]).is_err());
        assert!(o.grad(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn logistic_constants_examples() {
        let c = logistic(&[vec![2.0, 0.0]], 0.1).constants().unwrap();
        assert!((c.l - 1.1).abs() < 1e-12);
        assert_eq!(c.mu, 0.1);

        let c = random_logistic(4, 9, 1, 0.0).constants().unwrap();
        assert_eq!(c.mu, 0.0);
    }

    #[test]
    fn logistic_constants_match_dense_eigensolver() {
        let o = random_logistic(10, 50, 3, 0.1);
        let dense = o.data().to_dense();
        let gram: DMatrix<f64> = DMatrix::from_fn(10, 10, |i, j| dense.iter().map(|r| r[i] * r[j]).sum());
        let top = SymmetricEigen::new(gram).eigenvalues.max();
        let expect = top / (4.0 * 50.0) + 0.1;
        let l = o.constants().unwrap().l;
        assert!(((l - expect) / expect).abs() < 1e-8, "{l} vs {expect}");
    }

    #[test]
    fn quadratic_examples() {
        let q = QuadraticObjective::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0], 0.0).unwrap();
        let (v, g, m) = q.value_grad_min(&[3.0, 4.0]).unwrap();
        assert_eq!(v, 12.5);
        assert_eq!(g, vec![3.0, 4.0]);
        assert_eq!(m, vec![0.0, 0.0]);

        let q = QuadraticObjective::from_rows(&[vec![1.0, 0.0], vec![0.0, 4.0]], &[1.0, 4.0], 0.0).unwrap();
        assert!(linalg::max_abs_diff(q.minimizer(), &[1.0, 1.0]) < 1e-15);
        assert_eq!(q.constants(), ObjectiveConstants { l: 4.0, mu: 1.0 });
    }

    #[test]
    fn quadratic_random_minimizer_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let a = &m * m.transpose() + DMatrix::identity(6, 6) * 0.5;
        let b = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let q = QuadraticObjective::new(a, b, 0.3).unwrap();
        let g = q.grad(q.minimizer()).unwrap();
        assert!(linalg::norm(&g) <= 1e-10);
    }

    #[test]
    fn quadratic_rejects_non_pd_and_asymmetric() {
        let bad = QuadraticObjective::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]], &[0.0, 0.0], 0.0);
        assert!(bad.is_err());
        let asym = QuadraticObjective::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]], &[0.0, 0.0], 0.0);
        assert!(asym.is_err());
    }

    #[test]
    fn smoothness_and_strong_convexity_on_random_pairs() {
        let o: ClientObjective = random_logistic(6, 30, 21, 0.1).into();
        let c = o.constants().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..200 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let gx = o.grad(&x).unwrap();
            let gy = o.grad(&y).unwrap();
            let lhs = linalg::norm(&linalg::sub(&gx, &gy));
            assert!(lhs <= c.l * linalg::norm(&linalg::sub(&x, &y)) * (1.0 + 1e-9));
            let lower =
                o.value(&y).unwrap() + linalg::dot(&gy, &linalg::sub(&x, &y)) + 0.5 * c.mu * linalg::dist_sq(&x, &y);
            assert!(o.value(&x).unwrap() >= lower - 1e-12);
        }
    }
}
