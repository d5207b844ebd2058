//! Synthetic perfusion slice: piecewise-constant perfusion and transit-time
//! maps, a gamma-variate arterial input and exponential residue kernels,
//! pushed through the discrete forward map with additive Gaussian noise.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{convolve_to_observation_space, AifVector, KernelState, TimeGrid};
use crate::parallel::{map_range, Execution};
use crate::stochastics::RngStream;

/// Kernel scale relative to perfusion, `k(0) = p·ρ`. With this value a
/// perfusion of 70 gives `k(0) = 7·10⁻³`.
pub const DEFAULT_DENSITY: f64 = 1e-4;

/// Upper end of the admissible perfusion range.
pub const MAX_PERFUSION: f64 = 70.0;

const NOISE_STREAM: u64 = 0x6e_6f69_7365;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AifParams {
    /// peak value
    pub amplitude: f64,
    /// onset time
    pub t0: f64,
    pub a: f64,
    pub b: f64,
}

impl Default for AifParams {
    fn default() -> Self {
        Self {
            amplitude: 1750.0,
            t0: 10.0,
            a: 3.0,
            b: 0.3,
        }
    }
}

impl AifParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.amplitude > 0.0 && self.a > 0.0 && self.b > 0.0 && self.t0.is_finite();
        if !ok || !self.amplitude.is_finite() || !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::InvalidParams(format!("gamma-variate parameters {self:?}")));
        }
        Ok(())
    }

    /// Unchecked evaluation; call `validate` first.
    fn eval(&self, t: f64) -> f64 {
        if t <= self.t0 {
            return 0.0;
        }
        let x = (t - self.t0) / self.b;
        self.amplitude * (x / self.a).powf(self.a) * (self.a - x).exp()
    }
}

/// `A·((t−t0)/(a·b))^a·exp(a − (t−t0)/b)` after onset, zero before; the
/// maximum `A` is reached at `t0 + a·b`.
pub fn gamma_variate_aif(params: &AifParams, t: f64) -> Result<f64> {
    params.validate()?;
    Ok(params.eval(t))
}

/// One-compartment residue `p·ρ·exp(−t/mtt)` for `t ≥ 0`.
pub fn truth_kernel(p: f64, mtt: f64, rho: f64, t: f64) -> Result<f64> {
    check_tissue(p, mtt, rho)?;
    Ok(if t < 0.0 { 0.0 } else { p * rho * (-t / mtt).exp() })
}

fn check_tissue(p: f64, mtt: f64, rho: f64) -> Result<()> {
    if !(p >= 0.0) || !(mtt > 0.0) || !p.is_finite() || !mtt.is_finite() {
        return Err(Error::InvalidParams(format!("perfusion {p}, transit time {mtt}")));
    }
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::NonpositiveDensity(rho));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// voxels with `(x−cx)² + (y−cy)² ≤ r²`
    Disc { cx: f64, cy: f64, r: f64 },
    /// voxels with `x0 ≤ x < x1`, `y0 ≤ y < y1`
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
}

impl Shape {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                dx * dx + dy * dy <= r * r
            }
            Shape::Rect { x0, y0, x1, y1 } => (x0..x1).contains(&x) && (y0..y1).contains(&y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub shape: Shape,
    pub perfusion: f64,
    pub mtt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub nx: usize,
    pub ny: usize,
    /// Later regions override earlier ones.
    pub regions: Vec<Region>,
    pub background_perfusion: f64,
    pub background_mtt: f64,
    pub aif: AifParams,
    pub t_final: f64,
    pub dt_obs: f64,
    pub dtau: f64,
    /// σ_w, a variance
    pub noise_variance: f64,
    pub seed: u64,
    pub density: f64,
    /// Constant signal offset, subtracted again in `noisy`.
    pub baseline: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            nx: 1,
            ny: 1,
            regions: Vec::new(),
            background_perfusion: 60.0,
            background_mtt: 4.0,
            aif: AifParams::default(),
            t_final: 49.0,
            dt_obs: 0.25,
            dtau: 0.0625,
            noise_variance: 0.0,
            seed: 0,
            density: DEFAULT_DENSITY,
            baseline: 0.0,
        }
    }
}

impl PhantomSpec {
    /// 32×32 slice with a reduced (p = 30) and a strongly reduced (p = 10)
    /// lesion in a p = 60 background.
    pub fn two_lesion_slice() -> Self {
        Self {
            nx: 32,
            ny: 32,
            regions: vec![
                Region {
                    shape: Shape::Disc { cx: 10.0, cy: 11.0, r: 6.0 },
                    perfusion: 30.0,
                    mtt: 6.0,
                },
                Region {
                    shape: Shape::Disc { cx: 21.0, cy: 20.0, r: 6.0 },
                    perfusion: 10.0,
                    mtt: 8.0,
                },
            ],
            dt_obs: 1.0,
            noise_variance: 1e2 * 0.015625,
            ..Self::default()
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.nx * self.ny
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::with_max_observations(self.t_final, self.dtau, self.dt_obs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::InvalidParams(format!("empty slice {}x{}", self.nx, self.ny)));
        }
        self.aif.validate()?;
        let levels = std::iter::once((self.background_perfusion, self.background_mtt))
            .chain(self.regions.iter().map(|r| (r.perfusion, r.mtt)));
        for (p, mtt) in levels {
            check_tissue(p, mtt, self.density)?;
            if p > MAX_PERFUSION {
                return Err(Error::InvalidParams(format!(
                    "perfusion {p} outside [0, {MAX_PERFUSION}]"
                )));
            }
        }
        if !(self.noise_variance >= 0.0) || !self.noise_variance.is_finite() {
            return Err(Error::InvalidParams(format!(
                "noise variance {}",
                self.noise_variance
            )));
        }
        if !self.baseline.is_finite() {
            return Err(Error::InvalidParams(format!("baseline {}", self.baseline)));
        }
        self.grid().map(|_| ())
    }

    /// `(perfusion, mtt)` of voxel `(x, y)`.
    pub fn tissue_at(&self, x: usize, y: usize) -> (f64, f64) {
        self.regions
            .iter()
            .rev()
            .find(|r| r.shape.contains(x, y))
            .map_or((self.background_perfusion, self.background_mtt), |r| {
                (r.perfusion, r.mtt)
            })
    }

    /// Row-major `(perfusion, mtt)` of every voxel.
    pub fn tissue_map(&self) -> Vec<(f64, f64)> {
        (0..self.ny)
            .flat_map(|y| (0..self.nx).map(move |x| (x, y)))
            .map(|(x, y)| self.tissue_at(x, y))
            .collect()
    }
}

/// Discrete truth kernel on the quadrature abscissas.
pub fn truth_kernel_state(p: f64, mtt: f64, rho: f64, grid: &TimeGrid) -> Result<KernelState> {
    check_tissue(p, mtt, rho)?;
    Ok(KernelState(
        grid.abscissas()
            .iter()
            .map(|t| p * rho * (-t / mtt).exp())
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomDataset {
    pub spec: PhantomSpec,
    pub grid: TimeGrid,
    /// row-major `nx × ny`
    pub truth_map: Vec<f64>,
    pub mtt_map: Vec<f64>,
    pub aif: AifVector,
    /// one row of `n_obs` values per voxel
    pub clean: Vec<Vec<f64>>,
    /// `clean` plus noise, baseline already removed
    pub noisy: Vec<Vec<f64>>,
    pub baseline: f64,
}

pub fn generate(spec: &PhantomSpec) -> Result<PhantomDataset> {
    generate_with(spec, Execution::default())
}

pub fn generate_with(spec: &PhantomSpec, exec: Execution) -> Result<PhantomDataset> {
    spec.validate()?;
    let grid = spec.grid()?;
    let params = spec.aif;
    let aif = AifVector::from_fn(&grid, |t| params.eval(t))?;
    let tissue = spec.tissue_map();
    let clean = map_range(exec, tissue.len(), |j| {
        let (p, mtt) = tissue[j];
        let k = truth_kernel_state(p, mtt, spec.density, &grid)?;
        convolve_to_observation_space(&aif, &k, &grid)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let sd = spec.noise_variance.sqrt();
    let stream = RngStream::new(spec.seed, NOISE_STREAM);
    let noisy = map_range(exec, clean.len(), |j| {
        let mut rng = stream.child(j as u64).generator();
        clean[j]
            .iter()
            .map(|c| {
                let raw = c + spec.baseline + sd * rng.sample::<f64, _>(StandardNormal);
                raw - spec.baseline
            })
            .collect()
    });
    Ok(PhantomDataset {
        truth_map: tissue.iter().map(|t| t.0).collect(),
        mtt_map: tissue.iter().map(|t| t.1).collect(),
        spec: spec.clone(),
        grid,
        aif,
        clean,
        noisy,
        baseline: spec.baseline,
    })
}

/// Continuous-time tissue curve `∫₀ᵗ c_art(t − τ)·k(τ) dτ`, integrated
/// adaptively to a relative tolerance of about `1e-12`.
pub fn analytic_concentration(params: &AifParams, p: f64, mtt: f64, rho: f64, t: f64) -> Result<f64> {
    params.validate()?;
    check_tissue(p, mtt, rho)?;
    let upper = t - params.t0;
    if upper <= 0.0 {
        return Ok(0.0);
    }
    let f = |tau: f64| params.eval(t - tau) * p * rho * (-tau / mtt).exp();
    // split at the AIF peak, where the integrand is least smooth
    let peak = (upper - params.a * params.b).clamp(0.0, upper);
    let scale = params.amplitude * p * rho * upper.max(1.0);
    let tol = 1e-13 * scale.max(f64::MIN_POSITIVE);
    Ok(adaptive_simpson(&f, 0.0, peak, tol) + adaptive_simpson(&f, peak, upper, tol))
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}
