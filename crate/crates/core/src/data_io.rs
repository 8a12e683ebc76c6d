//! LIBSVM parsing, label folding, contiguous partitioning and synthetic
//! problem generation.

use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, FlixError, Result};
use crate::objectives::{ClientObjective, DataBlock, LogisticObjective, QuadraticObjective};

/// A two-class dataset with labels already mapped to `{-1, +1}`.
///
/// Rows are sparse with 0-based column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub labels: Vec<f64>,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub dim: usize,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `range` of the dataset as a new dataset with the same dimension.
    pub fn slice(&self, range: Range<usize>) -> RawDataset {
        RawDataset {
            labels: self.labels[range.clone()].to_vec(),
            rows: self.rows[range].to_vec(),
            dim: self.dim,
        }
    }
}

/// Maps raw class labels onto `{-1, +1}`.
///
/// Label sets already inside `{-1, +1}` are kept. Otherwise, with two
/// distinct values the numerically smaller one becomes `-1`; a single
/// value `v` becomes `-1` when `v <= 0` and `+1` otherwise.
pub fn map_labels(raw: &[f64]) -> Result<Vec<f64>> {
    let mut distinct: Vec<f64> = Vec::new();
    for &y in raw {
        if !y.is_finite() {
            return Err(invalid("non-finite label"));
        }
        if !distinct.contains(&y) {
            distinct.push(y);
            if distinct.len() > 2 {
                return Err(invalid(format!("more than two classes: {:?}", distinct)));
            }
        }
    }
    if distinct.iter().all(|&y| y == 1.0 || y == -1.0) {
        return Ok(raw.to_vec());
    }
    let lo = distinct.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(raw
        .iter()
        .map(|&y| {
            if distinct.len() == 2 {
                if y == lo {
                    -1.0
                } else {
                    1.0
                }
            } else if y <= 0.0 {
                -1.0
            } else {
                1.0
            }
        })
        .collect())
}

/// Parses LIBSVM text: `label idx:val idx:val ...`, 1-based strictly
/// increasing indices. Blank lines are skipped.
///
/// The dimension is the largest index seen unless `dim_override` is given,
/// in which case every index must fit inside it.
pub fn parse_libsvm(text: &str, dim_override: Option<usize>) -> Result<RawDataset> {
    let mut raw_labels = Vec::new();
    let mut rows = Vec::new();
    let mut max_idx = 0usize;
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        let err = |msg: String| FlixError::Parse { line: line_no, msg };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a token");
        let label: f64 = label_tok.parse().map_err(|_| err(format!("bad label {label_tok:?}")))?;
        let mut row = Vec::new();
        let mut prev = 0usize;
        for tok in tokens {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("malformed token {tok:?}")))?;
            let idx: usize = i.parse().map_err(|_| err(format!("bad index {i:?}")))?;
            let val: f64 = v.parse().map_err(|_| err(format!("bad value {v:?}")))?;
            if idx == 0 {
                return Err(err("indices are 1-based".into()));
            }
            if idx <= prev {
                return Err(err(format!("index {idx} not increasing")));
            }
            if !val.is_finite() {
                return Err(err(format!("non-finite value at index {idx}")));
            }
            prev = idx;
            max_idx = max_idx.max(idx);
            row.push((idx - 1, val));
        }
        raw_labels.push(label);
        rows.push(row);
    }
    let dim = match dim_override {
        Some(d) if d < max_idx => return Err(invalid(format!("dimension override {d} below max index {max_idx}"))),
        Some(d) => d,
        None => max_idx,
    };
    Ok(RawDataset {
        labels: map_labels(&raw_labels)?,
        rows,
        dim,
    })
}

/// Writes a dataset back in LIBSVM format. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_libsvm(ds: &RawDataset) -> String {
    let mut out = String::new();
    for (y, row) in ds.labels.iter().zip(&ds.rows) {
        let _ = write!(out, "{}", if *y > 0.0 { "+1" } else { "-1" });
        for (c, v) in row {
            let _ = write!(out, " {}:{:?}", c + 1, v);
        }
        out.push('\n');
    }
    out
}

/// Folds labels into the rows: row `j` becomes `y_j * feature_j`.
pub fn fold_labels(ds: &RawDataset) -> Result<DataBlock> {
    let labels = map_labels(&ds.labels)?;
    let rows: Vec<Vec<(usize, f64)>> = ds
        .rows
        .iter()
        .zip(&labels)
        .map(|(r, y)| r.iter().map(|&(c, v)| (c, y * v)).collect())
        .collect();
    DataBlock::from_sparse_rows(ds.dim, &rows)
}

/// Contiguous, order-preserving split of `r` rows over `n` machines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSpec {
    pub n: usize,
    pub ranges: Vec<Range<usize>>,
}

impl PartitionSpec {
    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }
}

/// Machine `i` (1-based) owns rows `⌊(i−1)r/n⌋ + 1 ..= ⌊ir/n⌋`; returned
/// here as 0-based half-open ranges.
pub fn partition_contiguous(r: usize, n: usize) -> Result<PartitionSpec> {
    if n == 0 {
        return Err(invalid("machine count must be positive"));
    }
    if n > r {
        return Err(invalid(format!("{n} machines for {r} rows leaves a machine empty")));
    }
    let bound = |i: usize| ((i as u128 * r as u128) / n as u128) as usize;
    let ranges = (0..n).map(|i| bound(i)..bound(i + 1)).collect();
    Ok(PartitionSpec { n, ranges })
}

/// Splits a dataset into per-machine logistic objectives.
pub fn logistic_clients(ds: &RawDataset, n: usize, lambda: f64) -> Result<Vec<ClientObjective>> {
    let part = partition_contiguous(ds.len(), n)?;
    part.ranges
        .into_iter()
        .map(|r| {
            let block = fold_labels(&ds.slice(r))?;
            Ok(LogisticObjective::new(block, lambda)?.into())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Quadratic,
    Logistic,
}

/// Parameters of a synthetic problem. All randomness comes from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub clients: usize,
    pub dim: usize,
    /// Rows per client (logistic only).
    pub per_client: usize,
    pub seed: u64,
    /// Spectrum bounds `[mu_min, l_max]` of each `A_i` (quadratic only).
    pub mu_min: f64,
    pub l_max: f64,
    /// Scale of each client's feature-mean offset (logistic only).
    pub mean_shift: f64,
    /// Regularization (logistic only).
    pub lambda: f64,
}

impl SyntheticSpec {
    pub fn logistic(clients: usize, dim: usize, per_client: usize, lambda: f64, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::Logistic,
            clients,
            dim,
            per_client,
            seed,
            mu_min: 1.0,
            l_max: 1.0,
            mean_shift: 0.5,
            lambda,
        }
    }

    pub fn quadratic(clients: usize, dim: usize, mu_min: f64, l_max: f64, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::Quadratic,
            clients,
            dim,
            per_client: 1,
            seed,
            mu_min,
            l_max,
            mean_shift: 0.0,
            lambda: 0.0,
        }
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Random orthogonal matrix from the QR factorization of a Gaussian matrix.
fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<ClientObjective>> {
    if spec.clients == 0 || spec.dim == 0 {
        return Err(invalid("synthetic problem needs clients > 0 and dim > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    match spec.kind {
        SyntheticKind::Quadratic => {
            if !(spec.mu_min > 0.0) || spec.l_max < spec.mu_min {
                return Err(invalid("quadratic spectrum needs 0 < mu_min <= l_max"));
            }
            let (lo, hi) = (spec.mu_min.ln(), spec.l_max.ln());
            (0..spec.clients)
                .map(|_| {
                    let q = random_orthogonal(&mut rng, d);
                    let spectrum = DVector::from_fn(d, |_, _| {
                        let t: f64 = rng.random();
                        (lo + t * (hi - lo)).exp()
                    });
                    let a = q.transpose() * DMatrix::from_diagonal(&spectrum) * &q;
                    let a = (&a + a.transpose()) * 0.5;
                    let b = DVector::from_vec(gaussian_vec(&mut rng, d));
                    Ok(QuadraticObjective::new(a, b, 0.0)?.into())
                })
                .collect()
        }
        SyntheticKind::Logistic => {
            if spec.per_client == 0 {
                return Err(invalid("logistic clients need at least one row"));
            }
            let inv_sqrt_d = 1.0 / (d as f64).sqrt();
            let truth: Vec<f64> = gaussian_vec(&mut rng, d).iter().map(|v| v * inv_sqrt_d).collect();
            (0..spec.clients)
                .map(|_| {
                    let shift: Vec<f64> = gaussian_vec(&mut rng, d).iter().map(|v| v * spec.mean_shift).collect();
                    let rows: Vec<Vec<f64>> = (0..spec.per_client)
                        .map(|_| {
                            let a: Vec<f64> = gaussian_vec(&mut rng, d)
                                .iter()
                                .zip(&shift)
                                .map(|(z, m)| z + m)
                                .collect();
                            let margin: f64 = a.iter().zip(&truth).map(|(x, w)| x * w).sum();
                            let p = 1.0 / (1.0 + (-margin).exp());
                            let y = if rng.random::<f64>() < p { 1.0 } else { -1.0 };
                            a.into_iter().map(|v| y * v).collect()
                        })
                        .collect();
                    Ok(LogisticObjective::new(DataBlock::from_dense_rows(&rows)?, spec.lambda)?.into())
                })
                .collect()
        }
    }
}
