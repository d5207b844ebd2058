//! `key = value` run configuration shared by all subcommands.

use std::path::PathBuf;

use perfusion_enkf::enkf::DEFAULT_RELATIVE_JITTER;
use perfusion_enkf::io::parse_key_values;
use perfusion_enkf::phantom::{AifParams, PhantomSpec, DEFAULT_DENSITY};
use perfusion_enkf::{AssimilationConfig, Execution, Thresholds};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sigma0: f64,
    pub sigma_e: f64,
    pub alpha: f64,
    pub ell: f64,
    pub n_e: usize,
    pub relative_jitter: f64,
    pub execution: Execution,
    pub seed: u64,
    /// Voxel-level worker threads.
    pub jobs: usize,
    /// Quadrature step; the dataset's own step when unset.
    pub dtau: Option<f64>,
    /// Kernel scale ρ; the dataset's own value when unset.
    pub density: Option<f64>,
    /// One noise stream for every voxel instead of one per voxel.
    pub reuse_noise: bool,
    pub thresholds: Thresholds,
    /// Voxels whose mean kernel is written out.
    pub kbar_voxels: Option<Vec<usize>>,
    pub record_history: bool,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub kind: Option<String>,
    pub study: StudyParams,
}

/// Single-voxel phantom and sweep values of the parameter studies.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyParams {
    pub perfusion: f64,
    pub mtt: f64,
    pub t_final: f64,
    pub dt_obs: f64,
    pub dtau: f64,
    pub noise_variance: f64,
    pub aif: AifParams,
    pub ensemble_sizes: Vec<usize>,
    pub substeps: Vec<usize>,
    pub ells: Vec<f64>,
    pub dt_obs_values: Vec<f64>,
    pub noise_levels: Vec<f64>,
}

impl Default for StudyParams {
    fn default() -> Self {
        Self {
            perfusion: 60.0,
            mtt: 4.0,
            t_final: 49.0,
            dt_obs: 0.25,
            dtau: 0.0625,
            noise_variance: 0.0,
            aif: AifParams::default(),
            ensemble_sizes: vec![64, 256, 1024, 4096],
            substeps: vec![1, 2, 4, 8, 16],
            ells: vec![0.125, 0.5, 2.0],
            dt_obs_values: vec![1.0, 0.5, 0.25, 0.125],
            noise_levels: (0..5).map(|i| 2f64.powi(-10 + 2 * i)).collect(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let r = AssimilationConfig::reference();
        Self {
            sigma0: r.sigma0,
            sigma_e: r.sigma_e,
            alpha: r.alpha,
            ell: r.ell,
            n_e: r.n_e,
            relative_jitter: DEFAULT_RELATIVE_JITTER,
            execution: Execution::default(),
            seed: 0,
            jobs: 1,
            dtau: None,
            density: None,
            reuse_noise: false,
            thresholds: Thresholds::default(),
            kbar_voxels: None,
            record_history: false,
            data: None,
            out: None,
            kind: None,
            study: StudyParams::default(),
        }
    }
}

fn bad(line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("config line {line}: {msg}"))
}

fn num<T: std::str::FromStr>(v: &str, line: usize, key: &str) -> CliResult<T> {
    v.parse()
        .map_err(|_| bad(line, format!("`{key}` has invalid value `{v}`")))
}

fn list<T: std::str::FromStr>(v: &str, line: usize, key: &str) -> CliResult<Vec<T>> {
    v.split(',').map(|s| num(s.trim(), line, key)).collect()
}

fn flag(v: &str, line: usize, key: &str) -> CliResult<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(line, format!("`{key}` expects true/false, got `{v}`"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut c = RunConfig::default();
        let pairs = parse_key_values(text).map_err(|e| CliError::Validation(format!("config {e}")))?;
        for (n, key, v) in pairs {
            let s = &mut c.study;
            let k = key.as_str();
            match k {
                "sigma0" => c.sigma0 = num(&v, n, k)?,
                "sigma_e" => c.sigma_e = num(&v, n, k)?,
                "alpha" => c.alpha = num(&v, n, k)?,
                "ell" => c.ell = num(&v, n, k)?,
                "n_e" => c.n_e = num(&v, n, k)?,
                "relative_jitter" => c.relative_jitter = num(&v, n, k)?,
                "execution" => {
                    c.execution = match v.as_str() {
                        "parallel" => Execution::Parallel,
                        "sequential" => Execution::Sequential,
                        _ => return Err(bad(n, format!("unknown execution mode `{v}`"))),
                    }
                }
                "seed" => c.seed = num(&v, n, k)?,
                "jobs" => c.jobs = num(&v, n, k)?,
                "dtau" => c.dtau = Some(num(&v, n, k)?),
                "density" => c.density = Some(num(&v, n, k)?),
                "reuse_noise" => c.reuse_noise = flag(&v, n, k)?,
                "threshold_low" => c.thresholds.low = num(&v, n, k)?,
                "threshold_mid_lo" => c.thresholds.mid_lo = num(&v, n, k)?,
                "threshold_mid_hi" => c.thresholds.mid_hi = num(&v, n, k)?,
                "threshold_high" => c.thresholds.high = num(&v, n, k)?,
                "kbar_voxels" => c.kbar_voxels = Some(list(&v, n, k)?),
                "record_history" => c.record_history = flag(&v, n, k)?,
                "data" => c.data = Some(PathBuf::from(v)),
                "out" => c.out = Some(PathBuf::from(v)),
                "kind" => c.kind = Some(v),
                "perfusion" => s.perfusion = num(&v, n, k)?,
                "mtt" => s.mtt = num(&v, n, k)?,
                "t_final" => s.t_final = num(&v, n, k)?,
                "dt_obs" => s.dt_obs = num(&v, n, k)?,
                "study_dtau" => s.dtau = num(&v, n, k)?,
                "noise_variance" => s.noise_variance = num(&v, n, k)?,
                "aif_amplitude" => s.aif.amplitude = num(&v, n, k)?,
                "aif_t0" => s.aif.t0 = num(&v, n, k)?,
                "aif_a" => s.aif.a = num(&v, n, k)?,
                "aif_b" => s.aif.b = num(&v, n, k)?,
                "ensemble_sizes" => s.ensemble_sizes = list(&v, n, k)?,
                "substeps" => s.substeps = list(&v, n, k)?,
                "ells" => s.ells = list(&v, n, k)?,
                "dt_obs_values" => s.dt_obs_values = list(&v, n, k)?,
                "noise_levels" => s.noise_levels = list(&v, n, k)?,
                other => return Err(bad(n, format!("unknown key `{other}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.assimilation().validate()?;
        self.thresholds.validate()?;
        if self.jobs == 0 {
            return Err(CliError::Validation("`jobs` must be at least 1".into()));
        }
        for (name, v) in [("dtau", self.dtau), ("density", self.density)] {
            if let Some(v) = v {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(CliError::Validation(format!("`{name}` must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }

    pub fn assimilation(&self) -> AssimilationConfig {
        AssimilationConfig {
            sigma0: self.sigma0,
            sigma_e: self.sigma_e,
            alpha: self.alpha,
            ell: self.ell,
            n_e: self.n_e,
            record_history: self.record_history,
            relative_jitter: self.relative_jitter,
            execution: self.execution,
        }
    }

    /// One-voxel phantom described by the study parameters.
    pub fn study_phantom(&self) -> PhantomSpec {
        let s = &self.study;
        PhantomSpec {
            background_perfusion: s.perfusion,
            background_mtt: s.mtt,
            aif: s.aif,
            t_final: s.t_final,
            dt_obs: s.dt_obs,
            dtau: s.dtau,
            noise_variance: s.noise_variance,
            seed: self.seed,
            density: self.density.unwrap_or(DEFAULT_DENSITY),
            ..PhantomSpec::default()
        }
    }
}
