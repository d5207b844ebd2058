//! Gaussian covariance kernel, its factorization, and reproducible random
//! streams.
//!
//! The squared-exponential kernel on a fine grid is numerically rank
//! deficient, so the factor is a diagonally pivoted Cholesky factor of
//! `Σ + jitter·I` truncated once the residual trace falls below a small
//! fraction of `‖Σ‖_F`. The factor is `N_q × r` with `r ≤ N_q`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::TimeGrid;

/// Relative trace tolerance of the truncated factor, `tr(residual) ≤ TRUNCATION·‖Σ‖_F`.
pub const TRUNCATION: f64 = 1e-10;

/// Escalations after the first attempt: jitter runs through `start·10^k`, `k = 0..=6`.
pub const MAX_JITTER_ESCALATIONS: u32 = 6;

/// Dense symmetric covariance matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    n: usize,
    entries: Vec<f64>,
    alpha: f64,
    ell: Option<f64>,
}

impl CovarianceMatrix {
    /// `σ_{l,l'} = α·exp(−(τ_l − τ_l')² / (2ℓ²))` on the abscissas of `grid`.
    pub fn gaussian(grid: &TimeGrid, alpha: f64, ell: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::NonpositiveParameter {
                name: "alpha",
                value: alpha,
            });
        }
        if !(ell > 0.0) || !ell.is_finite() {
            return Err(Error::NonpositiveParameter {
                name: "ell",
                value: ell,
            });
        }
        let n = grid.n_q();
        let dtau = grid.dtau();
        let inv = 1.0 / (2.0 * ell * ell);
        // entries depend on |l − l'| only
        let band: Vec<f64> = (0..n)
            .map(|d| {
                let dt = d as f64 * dtau;
                alpha * (-dt * dt * inv).exp()
            })
            .collect();
        let mut entries = vec![0.0; n * n];
        for l in 0..n {
            for lp in 0..n {
                entries[l * n + lp] = band[l.abs_diff(lp)];
            }
        }
        Ok(Self {
            n,
            entries,
            alpha,
            ell: Some(ell),
        })
    }

    /// Arbitrary symmetric matrix given row-major.
    pub fn from_dense(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                actual: entries.len(),
            });
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (entries[i * n + j], entries[j * n + i]);
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(f64::MIN_POSITIVE) {
                    return Err(Error::InvalidParams("covariance is not symmetric".into()));
                }
            }
        }
        let alpha = (0..n).map(|i| entries[i * n + i]).fold(0.0, f64::max);
        Ok(Self {
            n,
            entries,
            alpha,
            ell: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Scale α (largest diagonal entry for matrices not built from the kernel).
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn correlation_length(&self) -> Option<f64> {
        self.ell
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `Σ·x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.entries
            .chunks_exact(self.n)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Shorthand for [`CovarianceMatrix::gaussian`].
pub fn gaussian_covariance(grid: &TimeGrid, alpha: f64, ell: f64) -> Result<CovarianceMatrix> {
    CovarianceMatrix::gaussian(grid, alpha, ell)
}

/// Truncated pivoted Cholesky factor `L ∈ R^{n×r}` with `L·Lᵀ ≈ Σ + jitter·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseFactor {
    n: usize,
    rank: usize,
    /// row-major `n × rank`
    rows: Vec<f64>,
    jitter: f64,
    residual_trace: f64,
}

impl NoiseFactor {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Trace of `Σ + jitter·I − L·Lᵀ`, an upper bound on its Frobenius norm.
    pub fn residual_trace(&self) -> f64 {
        self.residual_trace
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.rank..(i + 1) * self.rank]
    }

    /// `L·w` for coefficients `w ∈ R^r`.
    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        debug_assert_eq!(w.len(), self.rank);
        self.rows
            .chunks_exact(self.rank.max(1))
            .take(self.n)
            .map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Lᵀ·x` restricted to the index range where `x` may be nonzero.
    pub fn apply_transpose(&self, x: &[f64], support: std::ops::Range<usize>) -> Vec<f64> {
        let mut out = vec![0.0; self.rank];
        for i in support {
            let xi = x[i];
            if xi != 0.0 {
                for (o, l) in out.iter_mut().zip(self.row(i)) {
                    *o += xi * l;
                }
            }
        }
        out
    }

    /// Dense `L·Lᵀ`, row-major.
    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = self.row(i).iter().zip(self.row(j)).map(|(a, b)| a * b).sum();
                out[i * n + j] = v;
                out[j * n + i] = v;
            }
        }
        out
    }
}

/// Factorizes `Σ + jitter·I`, escalating the jitter by factors of ten until
/// the pivoted factorization succeeds.
pub fn factorize(cov: &CovarianceMatrix, jitter_start: f64) -> Result<NoiseFactor> {
    if !(jitter_start >= 0.0) || !jitter_start.is_finite() {
        return Err(Error::NonpositiveParameter {
            name: "jitter",
            value: jitter_start,
        });
    }
    let tol = TRUNCATION * cov.frobenius_norm();
    let mut jitter = jitter_start;
    for _ in 0..=MAX_JITTER_ESCALATIONS {
        if let Some(factor) = pivoted_cholesky(cov, jitter, tol) {
            return Ok(factor);
        }
        jitter *= 10.0;
    }
    Err(Error::NotFactorizable {
        last_jitter: jitter / 10.0,
    })
}

fn pivoted_cholesky(cov: &CovarianceMatrix, jitter: f64, tol: f64) -> Option<NoiseFactor> {
    let n = cov.dim();
    let mut diag: Vec<f64> = (0..n).map(|i| cov.get(i, i) + jitter).collect();
    let mut pivoted = vec![false; n];
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let neg_tol = tol.max(f64::MIN_POSITIVE);

    loop {
        let mut trace = 0.0;
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !pivoted[i]) {
            let d = diag[i];
            if !d.is_finite() || d < -neg_tol {
                return None;
            }
            trace += d.abs();
            if best.is_none_or(|(_, b)| d > b) {
                best = Some((i, d));
            }
        }
        let Some((p, dp)) = best else { break };
        if trace <= tol {
            break;
        }
        if dp <= 0.0 {
            return None;
        }
        let lpp = dp.sqrt();
        let mut col = vec![0.0; n];
        col[p] = lpp;
        for i in (0..n).filter(|&i| !pivoted[i] && i != p) {
            let mut v = cov.get(i, p);
            for c in &columns {
                v -= c[i] * c[p];
            }
            let l = v / lpp;
            col[i] = l;
            diag[i] -= l * l;
        }
        pivoted[p] = true;
        diag[p] = 0.0;
        columns.push(col);
    }

    let rank = columns.len();
    let residual_trace = (0..n).filter(|&i| !pivoted[i]).map(|i| diag[i].abs()).sum();
    let mut rows = vec![0.0; n * rank];
    for (k, col) in columns.iter().enumerate() {
        for i in 0..n {
            rows[i * rank + k] = col[i];
        }
    }
    Some(NoiseFactor {
        n,
        rank,
        rows,
        jitter,
        residual_trace,
    })
}

/// Deterministic random stream identified by `(base_seed, stream_id)`.
///
/// Generators are ChaCha8 keyed by a SplitMix64 expansion of the pair; the
/// ChaCha stream word separates the stream's own generator (word 0) from
/// per-member sub-streams (word `m + 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub base_seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(base_seed: u64, stream_id: u64) -> Self {
        Self {
            base_seed,
            stream_id,
        }
    }

    fn key(&self) -> [u8; 32] {
        let mut state = self.base_seed ^ splitmix64(&mut self.stream_id.wrapping_add(0x5851_f42d));
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        key
    }

    pub fn generator(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key())
    }

    /// Independent generator for ensemble member `m`.
    pub fn member(&self, m: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key());
        rng.set_stream(m as u64 + 1);
        rng
    }

    /// Derived stream, e.g. one per voxel of a slice.
    pub fn child(&self, index: u64) -> RngStream {
        let mut s = self.stream_id ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        RngStream::new(self.base_seed, splitmix64(&mut s))
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fills `out` with i.i.d. standard normal draws.
pub fn fill_standard_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}

/// One draw `scale·L·z`, `z ~ N(0, I_r)`.
pub fn sample<R: Rng + ?Sized>(factor: &NoiseFactor, scale: f64, rng: &mut R) -> Vec<f64> {
    let mut z = vec![0.0; factor.rank()];
    fill_standard_normal(rng, &mut z);
    let mut x = factor.apply(&z);
    for v in &mut x {
        *v *= scale;
    }
    x
}
