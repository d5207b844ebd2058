//! Perturbed-observation ensemble Kalman filter over the random-walk
//! evolution model `k^(l+1) = k^(l) + √Δτ·n^(l)`, `n ~ N(0, Σ)`, and the
//! exact Kalman filter used as its oracle.
//!
//! Members are stored as coefficients in the column space of the noise
//! factor, `k_m = offset + L·w_m`. Initial draws and forecast increments lie
//! in that space, and the analysis gain `Σ^f hᵀ` is a combination of member
//! anomalies, so the ensemble never leaves it. Every step therefore costs
//! `O(N_e·r)` instead of `O(N_e·N_q)`, with `r` the factor rank, and the
//! empirical covariance is never formed unless asked for.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{forward_rows, AifVector, ForwardRow, KernelState, TimeGrid};
use crate::parallel::{for_each_chunk, map_chunks, Execution};
use crate::stochastics::{factorize, CovarianceMatrix, NoiseFactor, RngStream};

/// Default jitter relative to α.
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssimilationConfig {
    /// Scaling of the initial covariance, `k^(0) ~ N(0, σ0²Σ)`; zero gives a
    /// deterministic zero start.
    pub sigma0: f64,
    /// Observation error variance σ_e.
    pub sigma_e: f64,
    pub alpha: f64,
    pub ell: f64,
    pub n_e: usize,
    pub record_history: bool,
    /// Initial factorization nugget relative to α.
    pub relative_jitter: f64,
    pub execution: Execution,
}

impl AssimilationConfig {
    /// Single-voxel reference setting: α = (10⁻³)²·0.001, ℓ = 2, σ0 = 100,
    /// σ_e = 10²·0.0001, N_e = 5000.
    pub fn reference() -> Self {
        Self {
            sigma0: 100.0,
            sigma_e: 1e2 * 1e-4,
            alpha: 1e-6 * 1e-3,
            ell: 2.0,
            n_e: 5000,
            record_history: false,
            relative_jitter: DEFAULT_RELATIVE_JITTER,
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 >= 0.0) || !self.sigma0.is_finite() {
            return Err(Error::NonpositiveParameter {
                name: "sigma0",
                value: self.sigma0,
            });
        }
        for (name, value) in [
            ("sigma_e", self.sigma_e),
            ("alpha", self.alpha),
            ("ell", self.ell),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::NonpositiveParameter { name, value });
            }
        }
        if !(self.relative_jitter >= 0.0) {
            return Err(Error::NonpositiveParameter {
                name: "relative_jitter",
                value: self.relative_jitter,
            });
        }
        if self.n_e < 2 {
            return Err(Error::EnsembleTooSmall(self.n_e));
        }
        Ok(())
    }
}

/// Empirical mean and covariance (`1/(N_e − 1)` normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mean: Vec<f64>,
    /// row-major `N_q × N_q`
    pub covariance: Vec<f64>,
}

impl EnsembleStats {
    pub fn variance(&self, q: usize) -> f64 {
        let n = self.mean.len();
        self.covariance[q * n + q]
    }
}

/// Ensemble of `N_e` kernel states for one voxel.
#[derive(Debug, Clone)]
pub struct Ensemble {
    factor: Arc<NoiseFactor>,
    offset: Vec<f64>,
    coeffs: Vec<f64>,
    rngs: Vec<ChaCha8Rng>,
    exec: Execution,
}

impl Ensemble {
    /// Draws `n_e` members `σ0·L·z_m`, each from its own sub-stream.
    pub fn init(
        cfg: &AssimilationConfig,
        factor: Arc<NoiseFactor>,
        stream: RngStream,
    ) -> Result<Self> {
        if cfg.n_e < 2 {
            return Err(Error::EnsembleTooSmall(cfg.n_e));
        }
        let rank = factor.rank();
        let mut rngs: Vec<ChaCha8Rng> = (0..cfg.n_e).map(|m| stream.member(m)).collect();
        let mut coeffs = vec![0.0; cfg.n_e * rank];
        let sigma0 = cfg.sigma0;
        for_each_chunk(cfg.execution, &mut coeffs, rank, &mut rngs, |_, w, rng| {
            for v in w {
                *v = sigma0 * rng.sample::<f64, _>(StandardNormal);
            }
        });
        Ok(Self {
            offset: vec![0.0; factor.dim()],
            factor,
            coeffs,
            rngs,
            exec: cfg.execution,
        })
    }

    /// Shifts every member by `offset`.
    pub fn with_offset(mut self, offset: Vec<f64>) -> Result<Self> {
        if offset.len() != self.factor.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.factor.dim(),
                actual: offset.len(),
            });
        }
        self.offset = offset;
        Ok(self)
    }

    pub fn size(&self) -> usize {
        self.rngs.len()
    }

    pub fn state_dim(&self) -> usize {
        self.factor.dim()
    }

    pub fn factor(&self) -> &NoiseFactor {
        &self.factor
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    fn rank(&self) -> usize {
        self.factor.rank()
    }

    fn coeff(&self, m: usize) -> &[f64] {
        let r = self.rank();
        &self.coeffs[m * r..(m + 1) * r]
    }

    pub fn member(&self, m: usize) -> KernelState {
        let mut k = self.factor.apply(self.coeff(m));
        for (v, o) in k.iter_mut().zip(&self.offset) {
            *v += o;
        }
        KernelState(k)
    }

    pub fn members(&self) -> Vec<KernelState> {
        (0..self.size()).map(|m| self.member(m)).collect()
    }

    /// `k_m[q]` for every member.
    pub fn values_at(&self, q: usize) -> Vec<f64> {
        let row = self.factor.row(q);
        let off = self.offset[q];
        map_chunks(self.exec, &self.coeffs, self.rank(), self.size(), |_, w| {
            off + row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
        })
    }

    fn mean_coeffs(&self) -> Vec<f64> {
        let r = self.rank();
        let mut mean = vec![0.0; r];
        if r == 0 {
            return mean;
        }
        for w in self.coeffs.chunks_exact(r) {
            for (a, b) in mean.iter_mut().zip(w) {
                *a += b;
            }
        }
        let inv = 1.0 / self.size() as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        mean
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mean = self.factor.apply(&self.mean_coeffs());
        for (v, o) in mean.iter_mut().zip(&self.offset) {
            *v += o;
        }
        mean
    }

    /// Mean and full covariance `L·C_w·Lᵀ`.
    pub fn stats(&self) -> EnsembleStats {
        let r = self.rank();
        let n = self.state_dim();
        let wbar = self.mean_coeffs();
        let mut cw = vec![0.0; r * r];
        for m in 0..self.size() {
            let w = self.coeff(m);
            for i in 0..r {
                let ai = w[i] - wbar[i];
                for j in 0..=i {
                    cw[i * r + j] += ai * (w[j] - wbar[j]);
                }
            }
        }
        let inv = 1.0 / (self.size() as f64 - 1.0);
        for i in 0..r {
            for j in 0..=i {
                let v = cw[i * r + j] * inv;
                cw[i * r + j] = v;
                cw[j * r + i] = v;
            }
        }
        // B = L·C_w (n × r), then B·Lᵀ
        let mut b = vec![0.0; n * r];
        for q in 0..n {
            let lq = self.factor.row(q);
            for j in 0..r {
                b[q * r + j] = (0..r).map(|i| lq[i] * cw[i * r + j]).sum();
            }
        }
        let mut covariance = vec![0.0; n * n];
        for q in 0..n {
            for p in 0..=q {
                let v: f64 = b[q * r..(q + 1) * r]
                    .iter()
                    .zip(self.factor.row(p))
                    .map(|(x, y)| x * y)
                    .sum();
                covariance[q * n + p] = v;
                covariance[p * n + q] = v;
            }
        }
        EnsembleStats {
            mean: self.mean(),
            covariance,
        }
    }

    /// Gain in coefficient space and the predicted observations `h·k_m`.
    fn gain_coefficients(&self, row: &ForwardRow, sigma_e: f64) -> (Vec<f64>, Vec<f64>) {
        let r = self.rank();
        let g = self.factor.apply_transpose(row.weights(), row.support());
        let h_off = row.dot(&self.offset);
        let predicted: Vec<f64> = map_chunks(self.exec, &self.coeffs, r, self.size(), |_, w| {
            h_off + g.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
        });
        let n = self.size() as f64;
        let wbar = self.mean_coeffs();
        let ybar = predicted.iter().sum::<f64>() / n;
        let mut cross = vec![0.0; r];
        let mut hph = 0.0;
        for (m, y) in predicted.iter().enumerate() {
            let dy = y - ybar;
            hph += dy * dy;
            for ((c, w), wb) in cross.iter_mut().zip(self.coeff(m)).zip(&wbar) {
                *c += (w - wb) * dy;
            }
        }
        let denom = hph / (n - 1.0) + sigma_e;
        let scale = 1.0 / ((n - 1.0) * denom);
        cross.iter_mut().for_each(|c| *c *= scale);
        (cross, predicted)
    }
}

/// Whether the analysis perturbs each member's copy of the observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    Drawn,
    /// No perturbation; the ensemble mean then follows the exact Kalman mean
    /// update.
    None,
}

/// Draws `N_e` members of the initial state.
pub fn init_ensemble(
    cfg: &AssimilationConfig,
    factor: Arc<NoiseFactor>,
    stream: RngStream,
) -> Result<Ensemble> {
    Ensemble::init(cfg, factor, stream)
}

/// Propagates every member over `s` sub-steps, adding an independent
/// increment `√Δτ·L·z` per member and sub-step.
pub fn forecast_step(ens: &mut Ensemble, grid: &TimeGrid) {
    let r = ens.rank();
    let s = grid.substeps();
    let sqrt_dtau = grid.dtau().sqrt();
    let exec = ens.exec;
    for_each_chunk(exec, &mut ens.coeffs, r, &mut ens.rngs, |_, w, rng| {
        for _ in 0..s {
            for v in w.iter_mut() {
                *v += sqrt_dtau * rng.sample::<f64, _>(StandardNormal);
            }
        }
    });
}

/// State-space Kalman gain `u = Σ^f hᵀ / (h Σ^f hᵀ + σ_e)` of the current
/// ensemble.
pub fn kalman_gain(ens: &Ensemble, row: &ForwardRow, sigma_e: f64) -> Result<Vec<f64>> {
    check_analysis(ens, row, sigma_e)?;
    let (gain, _) = ens.gain_coefficients(row, sigma_e);
    Ok(ens.factor.apply(&gain))
}

fn check_analysis(ens: &Ensemble, row: &ForwardRow, sigma_e: f64) -> Result<()> {
    if !(sigma_e > 0.0) || !sigma_e.is_finite() {
        return Err(Error::NonpositiveVariance(sigma_e));
    }
    if row.len() != ens.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: ens.state_dim(),
            actual: row.len(),
        });
    }
    Ok(())
}

/// Perturbed-observation analysis against the scalar observation `c_obs`:
/// `k_m ← k_m − u·(h·k_m + e_m − c_obs)`, `e_m ~ N(0, σ_e)`.
pub fn analysis_step(ens: &mut Ensemble, row: &ForwardRow, c_obs: f64, sigma_e: f64) -> Result<()> {
    analysis_step_with(ens, row, c_obs, sigma_e, Perturbation::Drawn)
}

pub fn analysis_step_with(
    ens: &mut Ensemble,
    row: &ForwardRow,
    c_obs: f64,
    sigma_e: f64,
    perturbation: Perturbation,
) -> Result<()> {
    check_analysis(ens, row, sigma_e)?;
    let (gain, predicted) = ens.gain_coefficients(row, sigma_e);
    let r = ens.rank();
    let sd = sigma_e.sqrt();
    let exec = ens.exec;
    for_each_chunk(exec, &mut ens.coeffs, r, &mut ens.rngs, |m, w, rng| {
        let e = match perturbation {
            Perturbation::Drawn => sd * rng.sample::<f64, _>(StandardNormal),
            Perturbation::None => 0.0,
        };
        let innovation = predicted[m] + e - c_obs;
        for (v, u) in w.iter_mut().zip(&gain) {
            *v -= u * innovation;
        }
    });
    Ok(())
}

/// Final analysis ensemble of one voxel.
#[derive(Debug, Clone)]
pub struct VoxelPosterior {
    pub ensemble: Ensemble,
    pub mean: Vec<f64>,
    /// Analysis mean after each observation, when requested.
    pub history: Option<Vec<Vec<f64>>>,
}

impl VoxelPosterior {
    pub fn stats(&self) -> EnsembleStats {
        self.ensemble.stats()
    }

    /// `k̄(0)/ρ`.
    pub fn mean_perfusion(&self, rho: f64) -> Result<f64> {
        if !(rho > 0.0) {
            return Err(Error::NonpositiveDensity(rho));
        }
        Ok(self.mean[0] / rho)
    }
}

/// Everything shared by all voxels of one acquisition: grid, noise factor and
/// forward rows.
#[derive(Debug, Clone)]
pub struct Assimilator {
    cfg: AssimilationConfig,
    grid: TimeGrid,
    factor: Arc<NoiseFactor>,
    rows: Vec<ForwardRow>,
}

impl Assimilator {
    pub fn new(cfg: AssimilationConfig, grid: TimeGrid, aif: &AifVector) -> Result<Self> {
        cfg.validate()?;
        let cov = CovarianceMatrix::gaussian(&grid, cfg.alpha, cfg.ell)?;
        let factor = Arc::new(factorize(&cov, cfg.relative_jitter * cfg.alpha)?);
        let rows = forward_rows(aif, &grid)?;
        Ok(Self {
            cfg,
            grid,
            factor,
            rows,
        })
    }

    pub fn config(&self) -> &AssimilationConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn factor(&self) -> &Arc<NoiseFactor> {
        &self.factor
    }

    pub fn rows(&self) -> &[ForwardRow] {
        &self.rows
    }

    /// Forecast/analysis recursion over all observations.
    pub fn run(&self, observations: &[f64], stream: RngStream) -> Result<VoxelPosterior> {
        if observations.len() != self.grid.n_obs() {
            return Err(Error::DimensionMismatch {
                expected: self.grid.n_obs(),
                actual: observations.len(),
            });
        }
        let mut ens = Ensemble::init(&self.cfg, self.factor.clone(), stream)?;
        let mut history = self.cfg.record_history.then(Vec::new);
        for (row, &c) in self.rows.iter().zip(observations) {
            forecast_step(&mut ens, &self.grid);
            analysis_step(&mut ens, row, c, self.cfg.sigma_e)?;
            if let Some(h) = history.as_mut() {
                h.push(ens.mean());
            }
        }
        Ok(VoxelPosterior {
            mean: ens.mean(),
            ensemble: ens,
            history,
        })
    }
}

pub fn assimilate_voxel(
    cfg: &AssimilationConfig,
    grid: &TimeGrid,
    aif: &AifVector,
    observations: &[f64],
    stream: RngStream,
) -> Result<VoxelPosterior> {
    Assimilator::new(*cfg, *grid, aif)?.run(observations, stream)
}

/// Closed-form linear-Gaussian recursion on the dense covariance.
#[derive(Debug, Clone)]
pub struct KalmanOracle {
    n: usize,
    process: Vec<f64>,
    mean: Vec<f64>,
    cov: Vec<f64>,
}

impl KalmanOracle {
    /// Prior `N(0, σ0²Σ)`; each prediction adds `s·Δτ·Σ`.
    pub fn new(cfg: &AssimilationConfig, grid: &TimeGrid) -> Result<Self> {
        cfg.validate()?;
        let sigma = CovarianceMatrix::gaussian(grid, cfg.alpha, cfg.ell)?;
        let step = grid.substeps() as f64 * grid.dtau();
        let s0 = cfg.sigma0 * cfg.sigma0;
        Ok(Self {
            n: sigma.dim(),
            process: sigma.entries().iter().map(|v| v * step).collect(),
            mean: vec![0.0; sigma.dim()],
            cov: sigma.entries().iter().map(|v| v * s0).collect(),
        })
    }

    pub fn predict(&mut self) {
        for (c, p) in self.cov.iter_mut().zip(&self.process) {
            *c += p;
        }
    }

    pub fn update(&mut self, row: &ForwardRow, c_obs: f64, sigma_e: f64) -> Result<()> {
        if !(sigma_e > 0.0) {
            return Err(Error::NonpositiveVariance(sigma_e));
        }
        let n = self.n;
        let support = row.support();
        let h = row.weights();
        let ph: Vec<f64> = self
            .cov
            .chunks_exact(n)
            .map(|r| support.clone().map(|j| r[j] * h[j]).sum())
            .collect();
        let hph: f64 = support.clone().map(|j| h[j] * ph[j]).sum();
        let denom = hph + sigma_e;
        let innovation = row.dot(&self.mean) - c_obs;
        for (m, p) in self.mean.iter_mut().zip(&ph) {
            *m -= p / denom * innovation;
        }
        for i in 0..n {
            let ui = ph[i] / denom;
            for (j, phj) in ph.iter().enumerate().take(i + 1) {
                let v = self.cov[i * n + j] - ui * phj;
                self.cov[i * n + j] = v;
                self.cov[j * n + i] = v;
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// row-major `N_q × N_q`
    pub fn covariance(&self) -> &[f64] {
        &self.cov
    }

    pub fn variance(&self, q: usize) -> f64 {
        self.cov[q * self.n + q]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|q| self.variance(q)).sum()
    }
}

/// Exact posterior mean and covariance after all observations.
pub fn exact_kalman_filter(
    cfg: &AssimilationConfig,
    grid: &TimeGrid,
    aif: &AifVector,
    observations: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if observations.len() != grid.n_obs() {
        return Err(Error::DimensionMismatch {
            expected: grid.n_obs(),
            actual: observations.len(),
        });
    }
    let mut kf = KalmanOracle::new(cfg, grid)?;
    for (row, &c) in forward_rows(aif, grid)?.iter().zip(observations) {
        kf.predict();
        kf.update(row, c, cfg.sigma_e)?;
    }
    Ok((kf.mean, kf.cov))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> TimeGrid {
        TimeGrid::new(4.0, 0.25, 0.5, 8).unwrap()
    }

    fn small_cfg(n_e: usize) -> AssimilationConfig {
        AssimilationConfig {
            sigma0: 2.0,
            sigma_e: 0.05,
            alpha: 1.0,
            ell: 0.5,
            n_e,
            record_history: true,
            relative_jitter: DEFAULT_RELATIVE_JITTER,
            execution: Execution::Sequential,
        }
    }

    fn aif(grid: &TimeGrid) -> AifVector {
        AifVector::from_fn(grid, |t| t * (-t).exp() * 5.0).unwrap()
    }

    fn ensemble(cfg: &AssimilationConfig, grid: &TimeGrid, seed: u64) -> Ensemble {
        let cov = CovarianceMatrix::gaussian(grid, cfg.alpha, cfg.ell).unwrap();
        let factor = Arc::new(factorize(&cov, 1e-12).unwrap());
        Ensemble::init(cfg, factor, RngStream::new(seed, 0)).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(AssimilationConfig::reference().validate().is_ok());
        let mut c = small_cfg(10);
        c.sigma_e = 0.0;
        assert!(matches!(c.validate(), Err(Error::NonpositiveParameter { .. })));
        let c = small_cfg(1);
        assert_eq!(c.validate(), Err(Error::EnsembleTooSmall(1)));
    }

    #[test]
    fn scalar_kalman_update() {
        // N_q = 1: prior variance σ0²α, one prediction adds s·Δτ·α.
        let grid = TimeGrid::new(1.0, 1.0, 1.0, 1).unwrap();
        let cfg = AssimilationConfig {
            sigma0: 1.0,
            sigma_e: 1.0,
            alpha: 1.0,
            ell: 1.0,
            n_e: 2,
            ..small_cfg(2)
        };
        let aif = AifVector::new(vec![2.0]).unwrap();
        let mut kf = KalmanOracle::new(&cfg, &grid).unwrap();
        kf.predict();
        let row = ForwardRow::build(&aif, &grid, 1).unwrap();
        // row at t=1 touches k(0) with weight 0 (i·s = N_q) — use a longer grid
        assert_eq!(row.dot(&[1.0]), 0.0);
        let grid = TimeGrid::new(2.0, 1.0, 1.0, 1).unwrap();
        let aif = AifVector::new(vec![2.0, 0.0]).unwrap();
        let row = ForwardRow::build(&aif, &grid, 1).unwrap();
        let mut kf = KalmanOracle::new(&cfg, &grid).unwrap();
        kf.predict();
        let p = kf.variance(1);
        assert!((p - 2.0).abs() < 1e-12);
        kf.update(&row, 3.0, 1.0).unwrap();
        // h = (0, 2): posterior var 2 − (2·2)²/(4·2 + 1)
        assert!((kf.variance(1) - (2.0 - 16.0 / 9.0)).abs() < 1e-12);
        assert!((kf.mean()[1] - 4.0 * 3.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn forecast_variance_grows_linearly() {
        let grid = small_grid();
        let mut cfg = small_cfg(4000);
        cfg.sigma0 = 1e-6;
        let mut ens = ensemble(&cfg, &grid, 3);
        forecast_step(&mut ens, &grid);
        let stats = ens.stats();
        let expected = grid.substeps() as f64 * grid.dtau() * cfg.alpha;
        for q in 0..grid.n_q() {
            let v = stats.variance(q);
            assert!((v / expected - 1.0).abs() < 0.1, "q={q} var={v}");
        }
    }

    #[test]
    fn forecast_keeps_mean_in_expectation() {
        let grid = small_grid();
        let cfg = small_cfg(2000);
        let mut ens = ensemble(&cfg, &grid, 5).with_offset(vec![1.5; grid.n_q()]).unwrap();
        let before = ens.mean();
        forecast_step(&mut ens, &grid);
        let after = ens.mean();
        // sd of the mean shift: sqrt(s·Δτ·α / N_e) ≈ 0.016
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 0.08);
        }
    }

    #[test]
    fn identical_members_give_zero_gain() {
        let grid = small_grid();
        let mut cfg = small_cfg(6);
        cfg.sigma0 = 0.0;
        let mut ens = ensemble(&cfg, &grid, 1);
        ens.coeffs.iter_mut().for_each(|v| *v = 0.25);
        let row = ForwardRow::build(&aif(&grid), &grid, 4).unwrap();
        let gain = kalman_gain(&ens, &row, 0.1).unwrap();
        assert!(gain.iter().all(|&u| u == 0.0));
        let before = ens.members();
        analysis_step(&mut ens, &row, 10.0, 0.1).unwrap();
        assert_eq!(before, ens.members());
    }

    #[test]
    fn huge_observation_error_leaves_members() {
        let grid = small_grid();
        let cfg = small_cfg(50);
        let mut ens = ensemble(&cfg, &grid, 2);
        let row = ForwardRow::build(&aif(&grid), &grid, 6).unwrap();
        let before = ens.members();
        analysis_step(&mut ens, &row, 1.0, 1e12).unwrap();
        for (a, b) in before.iter().zip(ens.members()) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() < 1e-4 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn gain_matches_empirical_formula() {
        let grid = small_grid();
        let cfg = small_cfg(30);
        let ens = ensemble(&cfg, &grid, 9);
        let row = ForwardRow::build(&aif(&grid), &grid, 3).unwrap();
        let stats = ens.stats();
        let n = grid.n_q();
        let h = row.weights();
        let ph: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| stats.covariance[i * n + j] * h[j]).sum())
            .collect();
        let hph: f64 = (0..n).map(|i| h[i] * ph[i]).sum();
        let gain = kalman_gain(&ens, &row, cfg.sigma_e).unwrap();
        for (u, p) in gain.iter().zip(&ph) {
            let expect = p / (hph + cfg.sigma_e);
            assert!((u - expect).abs() < 1e-9 * (1.0 + expect.abs()), "{u} vs {expect}");
        }
    }

    #[test]
    fn unperturbed_mean_follows_kalman_update() {
        let grid = small_grid();
        let cfg = small_cfg(40);
        let mut ens = ensemble(&cfg, &grid, 4);
        let row = ForwardRow::build(&aif(&grid), &grid, 5).unwrap();
        let mean = ens.mean();
        let gain = kalman_gain(&ens, &row, cfg.sigma_e).unwrap();
        let innovation = row.dot(&mean) - 0.7;
        analysis_step_with(&mut ens, &row, 0.7, cfg.sigma_e, Perturbation::None).unwrap();
        for ((a, m), u) in ens.mean().iter().zip(&mean).zip(&gain) {
            assert!((a - (m - u * innovation)).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let grid = small_grid();
        let cfg = small_cfg(5);
        let mut ens = ensemble(&cfg, &grid, 0);
        let row = ForwardRow::build(&aif(&grid), &grid, 1).unwrap();
        assert_eq!(
            analysis_step(&mut ens, &row, 0.0, 0.0),
            Err(Error::NonpositiveVariance(0.0))
        );
        let a = Assimilator::new(cfg, grid, &aif(&grid)).unwrap();
        assert!(matches!(
            a.run(&[0.0; 3], RngStream::new(0, 0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn run_is_deterministic_and_mode_independent() {
        let grid = small_grid();
        let mut cfg = small_cfg(64);
        let obs: Vec<f64> = (1..=grid.n_obs()).map(|i| 0.1 * i as f64).collect();
        let a = assimilate_voxel(&cfg, &grid, &aif(&grid), &obs, RngStream::new(7, 1)).unwrap();
        cfg.execution = Execution::Parallel;
        let b = assimilate_voxel(&cfg, &grid, &aif(&grid), &obs, RngStream::new(7, 1)).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.history.as_ref().unwrap().len(), grid.n_obs());
        let c = assimilate_voxel(&cfg, &grid, &aif(&grid), &obs, RngStream::new(8, 1)).unwrap();
        assert_ne!(a.mean, c.mean);
    }

    #[test]
    fn large_ensemble_tracks_exact_filter() {
        let grid = small_grid();
        let mut cfg = small_cfg(20_000);
        cfg.record_history = false;
        let aif = aif(&grid);
        let truth: Vec<f64> = grid.abscissas().iter().map(|t| (-t).exp()).collect();
        let obs: Vec<f64> = forward_rows(&aif, &grid)
            .unwrap()
            .iter()
            .map(|r| r.dot(&truth))
            .collect();
        let post = assimilate_voxel(&cfg, &grid, &aif, &obs, RngStream::new(11, 0)).unwrap();
        let (mean, cov) = exact_kalman_filter(&cfg, &grid, &aif, &obs).unwrap();
        let n = grid.n_q();
        let err: f64 = post.mean.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = (0..n).map(|q| cov[q * n + q]).sum::<f64>().sqrt();
        assert!(err < 0.1 * scale, "err {err} scale {scale}");
    }
}
