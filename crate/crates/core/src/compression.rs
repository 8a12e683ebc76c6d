//! Unbiased randomized compressors `C` with `E‖C(v) − v‖² ≤ ω‖v‖²`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompressorKind {
    Identity,
    /// Keep a uniformly random `k`-subset of coordinates scaled by `d/k`.
    RandK(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressorSpec {
    kind: CompressorKind,
    dim: usize,
}

impl CompressorSpec {
    pub fn identity(dim: usize) -> Self {
        Self {
            kind: CompressorKind::Identity,
            dim,
        }
    }

    pub fn rand_k(k: usize, dim: usize) -> Result<Self> {
        if k == 0 || k > dim {
            return Err(invalid(format!("rand-k needs 1 <= k <= d (k={k}, d={dim})")));
        }
        Ok(Self {
            kind: CompressorKind::RandK(k),
            dim,
        })
    }

    pub fn kind(&self) -> CompressorKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `0` for identity, `d/k − 1` for rand-k.
    pub fn omega(&self) -> f64 {
        match self.kind {
            CompressorKind::Identity => 0.0,
            CompressorKind::RandK(k) => self.dim as f64 / k as f64 - 1.0,
        }
    }

    /// Floats sent per message (values only, indices are not counted).
    pub fn payload(&self) -> usize {
        match self.kind {
            CompressorKind::Identity => self.dim,
            CompressorKind::RandK(k) => k,
        }
    }

    /// Number of kept coordinates; `d` for identity.
    pub fn k(&self) -> usize {
        self.payload()
    }

    /// Draws one compressed copy of `v`. Rand-k consumes exactly one
    /// subset draw (a partial Fisher-Yates shuffle) from `rng`.
    pub fn compress<R: Rng + ?Sized>(&self, v: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        check_dim("compress", self.dim, v.len())?;
        Ok(match self.kind {
            CompressorKind::Identity => v.to_vec(),
            CompressorKind::RandK(k) => {
                let d = self.dim;
                let scale = d as f64 / k as f64;
                let mut idx: Vec<usize> = (0..d).collect();
                for i in 0..k {
                    let j = rng.random_range(i..d);
                    idx.swap(i, j);
                }
                let mut out = vec![0.0; d];
                for &i in &idx[..k] {
                    out[i] = scale * v[i];
                }
                out
            }
        })
    }
}

/// `round(1 + t(d − 1)/(count − 1))` for `t = 0..count`, deduplicated.
pub fn k_sweep(d: usize, count: usize) -> Vec<usize> {
    assert!(count >= 2, "k sweep needs at least two points");
    let mut ks: Vec<usize> = (0..count)
        .map(|t| (1.0 + t as f64 * (d as f64 - 1.0) / (count as f64 - 1.0)).round() as usize)
        .map(|k| k.clamp(1, d.max(1)))
        .collect();
    ks.dedup();
    ks
}

/// Generator for client `client` in round `round`, independent of the
/// order in which clients are processed.
pub fn client_rng(master_seed: u64, client: usize, round: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((client as u64) << 32) ^ round as u64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;

    #[test]
    fn identity_and_full_rand_k_are_exact() {
        let v = vec![1.0, -2.0, 3.5];
        let mut rng = client_rng(1, 0, 0);
        assert_eq!(CompressorSpec::identity(3).compress(&v, &mut rng).unwrap(), v);
        assert_eq!(CompressorSpec::rand_k(3, 3).unwrap().compress(&v, &mut rng).unwrap(), v);
    }

    #[test]
    fn omega_values() {
        assert_eq!(CompressorSpec::identity(7).omega(), 0.0);
        assert_eq!(CompressorSpec::rand_k(30, 300).unwrap().omega(), 9.0);
        assert_eq!(CompressorSpec::rand_k(5, 5).unwrap().omega(), 0.0);
        assert!(CompressorSpec::rand_k(0, 5).is_err());
        assert!(CompressorSpec::rand_k(6, 5).is_err());
    }

    #[test]
    fn rand_one_of_two_outcomes() {
        let spec = CompressorSpec::rand_k(1, 2).unwrap();
        let v = [2.0, 0.0];
        let draws = 100_000;
        let mut hits = 0usize;
        let mut mean = [0.0; 2];
        let mut rng = client_rng(42, 0, 0);
        for _ in 0..draws {
            let c = spec.compress(&v, &mut rng).unwrap();
            assert!(c == vec![4.0, 0.0] || c == vec![0.0, 0.0]);
            if c[0] != 0.0 {
                hits += 1;
            }
            mean[0] += c[0];
            mean[1] += c[1];
        }
        let m0 = mean[0] / draws as f64;
        // each outcome has probability 1/2: std of one draw is 2
        let se = 2.0 / (draws as f64).sqrt();
        assert!((m0 - 2.0).abs() <= 3.0 * se, "mean {m0}");
        assert_eq!(mean[1], 0.0);
        assert!((hits as f64 / draws as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn k_sweep_examples() {
        assert_eq!(k_sweep(7, 7), vec![1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(k_sweep(13, 7), vec![1, 3, 5, 7, 9, 11, 13]);
        assert_eq!(k_sweep(2, 7), vec![1, 2]);
        assert_eq!(k_sweep(112, 7), vec![1, 20, 38, 57, 75, 94, 112]);
    }

    #[test]
    fn client_streams_are_distinct() {
        let spec = CompressorSpec::rand_k(3, 50).unwrap();
        let v: Vec<f64> = (0..50).map(|i| i as f64 + 1.0).collect();
        let a = spec.compress(&v, &mut client_rng(9, 0, 0)).unwrap();
        let b = spec.compress(&v, &mut client_rng(9, 1, 0)).unwrap();
        let c = spec.compress(&v, &mut client_rng(9, 0, 1)).unwrap();
        let a2 = spec.compress(&v, &mut client_rng(9, 0, 0)).unwrap();
        assert_eq!(a, a2);
        assert!(a != b || a != c);
        assert!(linalg::norm_sq(&a) > 0.0);
    }
}
