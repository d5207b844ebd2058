//! Parameter sweeps on a single phantom voxel.

use std::fmt::Write as _;
use std::str::FromStr;

use perfusion_enkf::phantom::{analytic_concentration, generate, PhantomSpec};
use perfusion_enkf::posterior::{extract_samples, kde_variance, total_variation, Functional};
use perfusion_enkf::{
    convolve_to_observation_space, exact_kalman_filter, AifVector, AssimilationConfig, Assimilator,
    KernelState, RngStream, TimeGrid,
};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    EnsembleSize,
    Dtau,
    CorrLength,
    DtObs,
    Noise,
}

impl StudyKind {
    pub fn name(self) -> &'static str {
        match self {
            StudyKind::EnsembleSize => "ensemble_size",
            StudyKind::Dtau => "dtau",
            StudyKind::CorrLength => "corr_length",
            StudyKind::DtObs => "dt_obs",
            StudyKind::Noise => "noise",
        }
    }
}

impl FromStr for StudyKind {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Ok(match s {
            "ensemble_size" => StudyKind::EnsembleSize,
            "dtau" => StudyKind::Dtau,
            "corr_length" => StudyKind::CorrLength,
            "dt_obs" => StudyKind::DtObs,
            "noise" => StudyKind::Noise,
            _ => return Err(CliError::Validation(format!("unknown study kind `{s}`"))),
        })
    }
}

/// One plot-ready `(x, y)` curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub x_label: &'static str,
    pub y_label: &'static str,
    pub points: Vec<(f64, f64)>,
    /// Least-squares slope of `log y` against `log x`.
    pub slope: Option<f64>,
}

impl Series {
    fn new(name: &str, x_label: &'static str, y_label: &'static str, points: Vec<(f64, f64)>, fit: bool) -> Self {
        let slope = fit.then(|| loglog_slope(&points));
        Self {
            name: name.to_string(),
            x_label,
            y_label,
            points,
            slope,
        }
    }

    pub fn ys(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }

    pub fn format(&self, kind: StudyKind) -> String {
        let mut s = format!(
            "# study kind={} x={} y={}",
            kind.name(),
            self.x_label,
            self.y_label
        );
        if let Some(slope) = self.slope {
            let _ = write!(s, " slope={slope}");
        }
        s.push('\n');
        for (x, y) in &self.points {
            let _ = writeln!(s, "{x},{y}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub kind: StudyKind,
    pub series: Vec<Series>,
}

/// Ordinary least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn core<T>(ctx: &str, r: perfusion_enkf::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::from_core(ctx, e))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Stream of repetition `rep` at sweep point `point`.
fn stream(cfg: &RunConfig, point: usize, rep: usize) -> RngStream {
    RngStream::new(cfg.seed, point as u64).child(rep as u64)
}

struct Voxel {
    grid: TimeGrid,
    aif: AifVector,
    obs: Vec<f64>,
}

fn phantom_voxel(spec: &PhantomSpec) -> CliResult<Voxel> {
    let d = core("phantom", generate(spec))?;
    Ok(Voxel {
        grid: d.grid,
        aif: d.aif,
        obs: d.noisy.into_iter().next().unwrap_or_default(),
    })
}

pub fn run_study(kind: StudyKind, cfg: &RunConfig, seeds: usize) -> CliResult<StudyReport> {
    cfg.validate()?;
    let series = match kind {
        StudyKind::EnsembleSize => vec![ensemble_size(cfg, seeds)?],
        StudyKind::Dtau => vec![dtau(cfg, seeds)?],
        StudyKind::CorrLength => vec![corr_length(cfg, seeds)?],
        StudyKind::DtObs => vec![dt_obs(cfg, seeds)?],
        StudyKind::Noise => noise(cfg, seeds)?,
    };
    Ok(StudyReport { kind, series })
}

/// Relative ℓ2 distance of the ensemble mean from the exact filter mean,
/// averaged over seeds, against `N_e`.
fn ensemble_size(cfg: &RunConfig, seeds: usize) -> CliResult<Series> {
    let v = phantom_voxel(&cfg.study_phantom())?;
    let base = cfg.assimilation();
    let (oracle, _) = core("exact filter", exact_kalman_filter(&base, &v.grid, &v.aif, &v.obs))?;
    let mut points = Vec::new();
    for (p, &n_e) in cfg.study.ensemble_sizes.iter().enumerate() {
        let a = core("setup", Assimilator::new(AssimilationConfig { n_e, ..base }, v.grid, &v.aif))?;
        let errs = (0..seeds)
            .map(|r| Ok(rel_l2(&core("run", a.run(&v.obs, stream(cfg, p, r)))?.mean, &oracle)))
            .collect::<CliResult<Vec<_>>>()?;
        points.push((n_e as f64, mean(&errs)));
    }
    Ok(Series::new("ensemble_size", "n_e", "rel_l2_error", points, true))
}

/// Observation-space misfit of the posterior mean against the continuous
/// tissue curve, for `Δτ = Δt_obs/s`.
fn dtau(cfg: &RunConfig, seeds: usize) -> CliResult<Series> {
    let s = &cfg.study;
    let rho = cfg.density.unwrap_or(perfusion_enkf::phantom::DEFAULT_DENSITY);
    let mut points = Vec::new();
    for (p, &sub) in s.substeps.iter().enumerate() {
        if sub == 0 {
            return Err(CliError::Validation("substeps must be positive".into()));
        }
        let step = s.dt_obs / sub as f64;
        let grid = core("time grid", TimeGrid::with_max_observations(s.t_final, step, s.dt_obs))?;
        let aif_params = s.aif;
        let aif = core(
            "aif",
            AifVector::from_fn(&grid, |t| {
                perfusion_enkf::phantom::gamma_variate_aif(&aif_params, t).unwrap_or(f64::NAN)
            }),
        )?;
        let exact = grid
            .observation_times()
            .iter()
            .map(|&t| analytic_concentration(&s.aif, s.perfusion, s.mtt, rho, t))
            .collect::<perfusion_enkf::Result<Vec<_>>>();
        let exact = core("analytic curve", exact)?;
        let a = core("setup", Assimilator::new(cfg.assimilation(), grid, &aif))?;
        let errs = (0..seeds)
            .map(|r| {
                let post = core("run", a.run(&exact, stream(cfg, p, r)))?;
                let fitted = core(
                    "forward map",
                    convolve_to_observation_space(&aif, &KernelState(post.mean), &grid),
                )?;
                Ok(rel_l2(&fitted, &exact))
            })
            .collect::<CliResult<Vec<_>>>()?;
        points.push((step, mean(&errs)));
    }
    Ok(Series::new("dtau", "dtau", "rel_obs_error", points, true))
}

/// Total variation of the posterior mean against `ℓ`.
fn corr_length(cfg: &RunConfig, seeds: usize) -> CliResult<Series> {
    let v = phantom_voxel(&cfg.study_phantom())?;
    let mut points = Vec::new();
    for (p, &ell) in cfg.study.ells.iter().enumerate() {
        let a = core("setup", Assimilator::new(AssimilationConfig { ell, ..cfg.assimilation() }, v.grid, &v.aif))?;
        let tvs = (0..seeds)
            .map(|r| Ok(total_variation(&core("run", a.run(&v.obs, stream(cfg, p, r)))?.mean)))
            .collect::<CliResult<Vec<_>>>()?;
        points.push((ell, mean(&tvs)));
    }
    Ok(Series::new("corr_length", "ell", "total_variation", points, false))
}

/// KDE variance of `k(0)` against the observation step.
fn dt_obs(cfg: &RunConfig, seeds: usize) -> CliResult<Series> {
    let mut points = Vec::new();
    for (p, &dt) in cfg.study.dt_obs_values.iter().enumerate() {
        let v = phantom_voxel(&PhantomSpec { dt_obs: dt, ..cfg.study_phantom() })?;
        let a = core("setup", Assimilator::new(cfg.assimilation(), v.grid, &v.aif))?;
        let vars = (0..seeds)
            .map(|r| {
                let post = core("run", a.run(&v.obs, stream(cfg, p, r)))?;
                let samples = core("samples", extract_samples(&post, Functional::PointEvalAt0, 1.0))?;
                Ok(kde_variance(&samples))
            })
            .collect::<CliResult<Vec<_>>>()?;
        points.push((dt, mean(&vars)));
    }
    Ok(Series::new("dt_obs", "dt_obs", "kde_variance_k0", points, false))
}

/// Noise level `v`: noise variance `σ_w = 10²·v`, filter run with
/// `σ_e = σ_w`; one noise realization and filter stream per seed. Reports
/// the mean relative error of the posterior-mean perfusion and the mean
/// posterior variance of `k(0)`.
fn noise(cfg: &RunConfig, seeds: usize) -> CliResult<Vec<Series>> {
    let mut errors = Vec::new();
    let mut variances = Vec::new();
    for (p, &level) in cfg.study.noise_levels.iter().enumerate() {
        let sigma_w = 1e2 * level;
        let acfg = AssimilationConfig { sigma_e: sigma_w, ..cfg.assimilation() };
        let mut errs = Vec::with_capacity(seeds);
        let mut vars = Vec::with_capacity(seeds);
        let mut assimilator: Option<Assimilator> = None;
        for r in 0..seeds {
            let spec = PhantomSpec {
                noise_variance: sigma_w,
                seed: cfg.seed.wrapping_add(r as u64),
                ..cfg.study_phantom()
            };
            let v = phantom_voxel(&spec)?;
            let a = match &assimilator {
                Some(a) => a,
                None => assimilator.insert(core("setup", Assimilator::new(acfg, v.grid, &v.aif))?),
            };
            let post = core("run", a.run(&v.obs, stream(cfg, p, r)))?;
            let p_bar = post.mean[0] / spec.density;
            errs.push((p_bar - spec.background_perfusion).abs() / spec.background_perfusion);
            let samples = core("samples", extract_samples(&post, Functional::PointEvalAt0, 1.0))?;
            vars.push(samples.variance());
        }
        errors.push((level, mean(&errs)));
        variances.push((level, mean(&vars)));
    }
    Ok(vec![
        Series::new("noise_error", "alpha_rel", "rel_error_p", errors, false),
        Series::new("noise_variance", "alpha_rel", "variance_k0", variances, false),
    ])
}
