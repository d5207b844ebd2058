//! Time discretization and the rectangular-rule forward map of the
//! indicator-dilution convolution
//!
//! ```text
//! c(t_i) = ∫_0^T c_art(τ) k(t_i − τ) dτ  ≈  Δτ Σ_q c_art[q] k[i·s − q]
//! ```
//!
//! with `k(t) = 0` for `t < 0`. Each observation `i` becomes one row of
//! weights acting on the discrete kernel `k ∈ R^{N_q}`.

use std::ops::Range;

use crate::error::{Error, Result};

const SUBSTEP_TOL: f64 = 1e-9;
const GRID_TOL: f64 = 1e-9;

/// Quadrature and evolution time grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_final: f64,
    dtau: f64,
    dt_obs: f64,
    substeps: usize,
    n_q: usize,
    n_obs: usize,
}

impl TimeGrid {
    /// Builds the grid `τ_q = q·Δτ`, `q < N_q = T/Δτ`, with observations at
    /// `t_i = i·Δt_obs`, `i = 1..=n_obs`, and `Δt_obs = s·Δτ`.
    pub fn new(t_final: f64, dtau: f64, dt_obs: f64, n_obs: usize) -> Result<Self> {
        for (name, value) in [("T", t_final), ("dtau", dtau), ("dt_obs", dt_obs)] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::NonpositiveParameter { name, value });
            }
        }
        let ratio = dt_obs / dtau;
        let substeps = ratio.round();
        if substeps < 1.0 || (ratio - substeps).abs() > SUBSTEP_TOL * substeps.max(1.0) {
            return Err(Error::NonIntegerSubstep { dt_obs, dtau });
        }
        let n_q = (t_final / dtau).round();
        if n_q < 1.0 || (n_q * dtau - t_final).abs() > GRID_TOL * t_final {
            return Err(Error::NonIntegerQuadrature { t_final, dtau });
        }
        if n_obs as f64 * dt_obs > t_final * (1.0 + GRID_TOL) {
            return Err(Error::GridOverrun {
                n_obs,
                dt_obs,
                t_final,
            });
        }
        Ok(Self {
            t_final,
            dtau,
            dt_obs,
            substeps: substeps as usize,
            n_q: n_q as usize,
            n_obs,
        })
    }

    /// Grid with as many observations as fit into `[0, T]`.
    pub fn with_max_observations(t_final: f64, dtau: f64, dt_obs: f64) -> Result<Self> {
        let n_obs = (t_final / dt_obs * (1.0 + GRID_TOL)).floor().max(0.0) as usize;
        Self::new(t_final, dtau, dt_obs, n_obs)
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn dtau(&self) -> f64 {
        self.dtau
    }

    pub fn dt_obs(&self) -> f64 {
        self.dt_obs
    }

    /// Sub-steps `s` per observation interval.
    pub fn substeps(&self) -> usize {
        self.substeps
    }

    /// Number of quadrature abscissas `N_q`.
    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn abscissa(&self, q: usize) -> f64 {
        q as f64 * self.dtau
    }

    pub fn abscissas(&self) -> Vec<f64> {
        (0..self.n_q).map(|q| self.abscissa(q)).collect()
    }

    /// `t_i = i·Δt_obs`, 1-based.
    pub fn observation_time(&self, i: usize) -> f64 {
        i as f64 * self.dt_obs
    }

    pub fn observation_times(&self) -> Vec<f64> {
        (1..=self.n_obs).map(|i| self.observation_time(i)).collect()
    }
}

/// Arterial input function sampled at the abscissas.
#[derive(Debug, Clone, PartialEq)]
pub struct AifVector {
    values: Vec<f64>,
}

impl AifVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(q) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::DomainError(q as f64));
        }
        Ok(Self { values })
    }

    /// Evaluates `c_art` at every abscissa.
    pub fn from_fn(grid: &TimeGrid, c_art: impl Fn(f64) -> f64) -> Result<Self> {
        let values = (0..grid.n_q())
            .map(|q| {
                let t = grid.abscissa(q);
                let v = c_art(t);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::DomainError(t))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { values })
    }

    /// Interpolates a sampled series onto the abscissas with a monotone
    /// piecewise-cubic (Fritsch–Carlson) interpolant.
    pub fn from_samples(grid: &TimeGrid, times: &[f64], values: &[f64]) -> Result<Self> {
        let interp = MonotoneCubic::new(times, values)?;
        Self::from_fn(grid, |t| interp.eval(t).unwrap_or(f64::NAN))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Monotone piecewise-cubic Hermite interpolant.
#[derive(Debug, Clone)]
pub struct MonotoneCubic {
    x: Vec<f64>,
    y: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                actual: y.len(),
            });
        }
        if x.len() < 2 {
            return Err(Error::InvalidParams(
                "interpolation needs at least two samples".into(),
            ));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(
                "sample times must be strictly increasing with finite values".into(),
            ));
        }
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut slopes = vec![0.0; n];
        if n == 2 {
            slopes[0] = delta[0];
            slopes[1] = delta[0];
        } else {
            for k in 1..n - 1 {
                if delta[k - 1] * delta[k] > 0.0 {
                    // weighted harmonic mean
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    slopes[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
                }
            }
            slopes[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            slopes[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(Self {
            x: x.to_vec(),
            y: y.to_vec(),
            slopes,
        })
    }

    /// `None` outside the sampled range.
    pub fn eval(&self, t: f64) -> Option<f64> {
        let n = self.x.len();
        if !(t >= self.x[0] && t <= self.x[n - 1]) {
            return None;
        }
        let k = match self.x.partition_point(|&xk| xk <= t) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let h = self.x[k + 1] - self.x[k];
        let u = (t - self.x[k]) / h;
        let h00 = (1.0 + 2.0 * u) * (1.0 - u) * (1.0 - u);
        let h10 = u * (1.0 - u) * (1.0 - u);
        let h01 = u * u * (3.0 - 2.0 * u);
        let h11 = u * u * (u - 1.0);
        Some(
            h00 * self.y[k]
                + h10 * h * self.slopes[k]
                + h01 * self.y[k + 1]
                + h11 * h * self.slopes[k + 1],
        )
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

/// One row `H_i` of the discrete forward map.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRow {
    weights: Vec<f64>,
    obs_index: usize,
    support: Range<usize>,
}

impl ForwardRow {
    /// `weights[m] = Δτ·c_art[i·s − m]` where both indices are valid.
    pub fn build(aif: &AifVector, grid: &TimeGrid, i: usize) -> Result<Self> {
        if aif.len() != grid.n_q() {
            return Err(Error::DimensionMismatch {
                expected: grid.n_q(),
                actual: aif.len(),
            });
        }
        if i == 0 || i > grid.n_obs() {
            return Err(Error::IndexError {
                index: i,
                n_obs: grid.n_obs(),
            });
        }
        let n_q = grid.n_q();
        let lag = i * grid.substeps();
        let lo = (lag + 1).saturating_sub(n_q);
        let hi = lag.min(n_q - 1) + 1;
        let mut weights = vec![0.0; n_q];
        let c = aif.values();
        for m in lo..hi {
            weights[m] = grid.dtau() * c[lag - m];
        }
        Ok(Self {
            weights,
            obs_index: i,
            support: lo..hi.max(lo),
        })
    }

    /// Row with explicit weights, e.g. a direct observation of one state.
    pub fn from_weights(weights: Vec<f64>, obs_index: usize) -> Result<Self> {
        if let Some(&w) = weights.iter().find(|w| !w.is_finite()) {
            return Err(Error::DomainError(w));
        }
        let lo = weights.iter().position(|w| *w != 0.0).unwrap_or(0);
        let hi = weights.iter().rposition(|w| *w != 0.0).map_or(lo, |p| p + 1);
        Ok(Self {
            weights,
            obs_index,
            support: lo..hi,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn obs_index(&self) -> usize {
        self.obs_index
    }

    /// Index range outside of which all weights vanish.
    pub fn support(&self) -> Range<usize> {
        self.support.clone()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn nonzero_count(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }

    /// Dot product over the support.
    pub fn dot(&self, values: &[f64]) -> f64 {
        let r = self.support();
        self.weights[r.clone()]
            .iter()
            .zip(&values[r])
            .map(|(w, v)| w * v)
            .sum()
    }
}

/// Discrete kernel trajectory `k[q] = k(q·Δτ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelState(pub Vec<f64>);

impl KernelState {
    pub fn zeros(n_q: usize) -> Self {
        Self(vec![0.0; n_q])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for KernelState {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfusionValue {
    /// `k(0)/ρ`, the primary quantity of interest.
    pub p_point: f64,
    /// `max_t k(t)/ρ`.
    pub p_max: f64,
    pub rho: f64,
}

/// Noise-free concentration predicted by `row` for kernel `k`.
pub fn apply_forward(row: &ForwardRow, k: &KernelState) -> Result<f64> {
    if row.len() != k.len() {
        return Err(Error::DimensionMismatch {
            expected: row.len(),
            actual: k.len(),
        });
    }
    Ok(row.dot(k.values()))
}

/// All rows `H_1..H_{n_obs}` for one AIF.
pub fn forward_rows(aif: &AifVector, grid: &TimeGrid) -> Result<Vec<ForwardRow>> {
    (1..=grid.n_obs())
        .map(|i| ForwardRow::build(aif, grid, i))
        .collect()
}

/// Maps a kernel into observation space, `(c_art ∗ k)(t_i)` for every `i`.
pub fn convolve_to_observation_space(
    aif: &AifVector,
    k: &KernelState,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    if k.len() != grid.n_q() {
        return Err(Error::DimensionMismatch {
            expected: grid.n_q(),
            actual: k.len(),
        });
    }
    forward_rows(aif, grid)?
        .iter()
        .map(|row| apply_forward(row, k))
        .collect()
}

pub fn perfusion_from_kernel(k: &KernelState, rho: f64) -> Result<PerfusionValue> {
    if !(rho > 0.0) {
        return Err(Error::NonpositiveDensity(rho));
    }
    let first = *k.values().first().ok_or(Error::DimensionMismatch {
        expected: 1,
        actual: 0,
    })?;
    let max = k.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(PerfusionValue {
        p_point: first / rho,
        p_max: max / rho,
        rho,
    })
}
