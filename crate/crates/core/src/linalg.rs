//! Small dense-vector helpers and the power iteration used for smoothness
//! constants. Vectors are plain `[f64]` slices throughout the crate.

use crate::error::{FlixError, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn scale(a: f64, x: &mut [f64]) {
    for xi in x.iter_mut() {
        *xi *= a;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Sum of vectors in index order, divided by their count.
///
/// The order of summation is fixed so the result does not depend on how
/// the inputs were produced.
pub fn ordered_mean(vs: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    for v in vs {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = vs.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    acc
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Settings for [`power_iteration`].
#[derive(Debug, Clone, Copy)]
pub struct PowerIterOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for PowerIterOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-9,
            max_iter: 10_000,
        }
    }
}

/// Largest eigenvalue of a symmetric positive semidefinite operator given
/// only through its action `apply(v, out)`.
///
/// Starts from the normalized all-ones vector and stops once successive
/// Rayleigh quotients agree to `rel_tol`.
pub fn power_iteration<F>(d: usize, opts: PowerIterOptions, mut apply: F) -> Result<f64>
where
    F: FnMut(&[f64], &mut [f64]),
{
    if d == 0 {
        return Ok(0.0);
    }
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut w = vec![0.0; d];
    let mut lambda = 0.0;
    for it in 1..=opts.max_iter {
        w.iter_mut().for_each(|x| *x = 0.0);
        apply(&v, &mut w);
        // v is unit-norm, so this is the Rayleigh quotient.
        let next = dot(&v, &w);
        let wn = norm(&w);
        if !wn.is_finite() {
            return Err(FlixError::NumericFailure {
                iterations: it,
                msg: "non-finite operator output".into(),
            });
        }
        if wn == 0.0 {
            return Ok(0.0);
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / wn;
        }
        if it > 1 && (next - lambda).abs() <= opts.rel_tol * next.abs() {
            return Ok(next);
        }
        lambda = next;
    }
    Err(FlixError::NumericFailure {
        iterations: opts.max_iter,
        msg: format!("power iteration did not reach relative tolerance {:e}", opts.rel_tol),
    })
}
