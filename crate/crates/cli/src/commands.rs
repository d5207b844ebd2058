use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use perfusion_enkf::io::{self, Map, StoredDataset};
use perfusion_enkf::posterior::{summarize_voxel, PerfusionSummary};
use perfusion_enkf::{phantom, Assimilator, Execution, RngStream, TimeGrid};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::study::{run_study, StudyKind};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Validation(format!("{}: {e}", path.display()))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn read_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    RunConfig::parse(&text)
}

/// Generates a phantom dataset from a spec file.
pub fn cmd_phantom(spec_path: &Path, out: &Path) -> CliResult<()> {
    let text = fs::read_to_string(spec_path).map_err(|e| io_err(spec_path, e))?;
    let spec = io::parse_spec(&text).map_err(|e| CliError::from_core(spec_path.display(), e))?;
    let data = phantom::generate(&spec).map_err(|e| CliError::from_core("phantom", e))?;
    io::write_dataset(out, &data)?;
    Ok(())
}

/// Per-voxel result of a slice assimilation.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelResult {
    pub summary: PerfusionSummary,
    pub mean: Option<Vec<f64>>,
    pub history: Option<Vec<Vec<f64>>>,
}

/// Output of `assimilate` before it is written to disk.
#[derive(Debug, Clone)]
pub struct SliceResult {
    pub nx: usize,
    pub ny: usize,
    pub grid: TimeGrid,
    pub voxels: Vec<VoxelResult>,
}

impl SliceResult {
    fn map(&self, f: impl Fn(&PerfusionSummary) -> f64) -> Map {
        let values = self.voxels.iter().map(|v| f(&v.summary)).collect();
        Map {
            nx: self.nx,
            ny: self.ny,
            values,
        }
    }

    pub fn mean_map(&self) -> Map {
        self.map(|s| s.mean_p)
    }

    pub fn variance_map(&self) -> Map {
        self.map(|s| s.var_p)
    }

    pub fn prob_low_map(&self) -> Map {
        self.map(|s| s.prob_low)
    }

    pub fn prob_mid_map(&self) -> Map {
        self.map(|s| s.prob_mid)
    }

    pub fn prob_high_map(&self) -> Map {
        self.map(|s| s.prob_high)
    }
}

/// Runs the filter on every voxel of a stored dataset.
///
/// Voxel `j` draws from `RngStream(seed, 0).child(j)` (or `child(0)` for all
/// voxels with `reuse_noise`), so results do not depend on `cfg.jobs`.
pub fn assimilate_dataset(data: &StoredDataset, cfg: &RunConfig) -> CliResult<SliceResult> {
    let spec = &data.spec;
    let dtau = cfg.dtau.unwrap_or(spec.dtau);
    let n_obs = data.noisy.n_obs;
    let grid = TimeGrid::new(spec.t_final, dtau, data.noisy.dt_obs, n_obs)
        .map_err(|e| CliError::from_core("time grid", e))?;
    let aif = data.aif.to_vector(&grid).map_err(|e| CliError::from_core("aif", e))?;
    let rho = cfg.density.unwrap_or(spec.density);
    let n_vox = data.noisy.rows.len();
    let wanted: Vec<bool> = match &cfg.kbar_voxels {
        Some(ids) => {
            if let Some(&bad) = ids.iter().find(|&&id| id >= n_vox) {
                return Err(CliError::Validation(format!(
                    "kbar voxel {bad} outside 0..{n_vox}"
                )));
            }
            (0..n_vox).map(|j| ids.contains(&j)).collect()
        }
        None => vec![n_vox == 1; n_vox],
    };
    // Split the work at the voxel level when there are enough voxels.
    let mut acfg = cfg.assimilation();
    let voxel_parallel = n_vox > 1;
    if voxel_parallel {
        acfg.execution = Execution::Sequential;
    }
    let assimilator = Assimilator::new(acfg, grid, &aif).map_err(|e| CliError::from_core("setup", e))?;
    let base = RngStream::new(cfg.seed, 0);
    let run = |j: usize| -> CliResult<VoxelResult> {
        let stream = base.child(if cfg.reuse_noise { 0 } else { j as u64 });
        let ctx = format!("voxel {j}");
        let post = assimilator
            .run(&data.noisy.rows[j], stream)
            .map_err(|e| CliError::from_core(&ctx, e))?;
        if post.mean.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Numerical(format!("{ctx}: non-finite posterior mean")));
        }
        let summary = summarize_voxel(&post, rho, cfg.thresholds).map_err(|e| CliError::from_core(&ctx, e))?;
        Ok(VoxelResult {
            summary,
            mean: wanted[j].then(|| post.mean.clone()),
            history: if wanted[j] { post.history } else { None },
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    let voxels: Vec<CliResult<VoxelResult>> = pool.install(|| {
        use rayon::prelude::*;
        if voxel_parallel {
            (0..n_vox).into_par_iter().map(run).collect()
        } else {
            (0..n_vox).map(run).collect()
        }
    });
    Ok(SliceResult {
        nx: data.truth.nx,
        ny: data.truth.ny,
        grid,
        voxels: voxels.into_iter().collect::<CliResult<_>>()?,
    })
}

pub fn write_slice(out: &Path, result: &SliceResult) -> CliResult<()> {
    ensure_dir(out)?;
    let maps = [
        ("perfusion_mean", result.mean_map()),
        ("perfusion_var", result.variance_map()),
        ("perfusion_prob_low", result.prob_low_map()),
        ("perfusion_prob_mid", result.prob_mid_map()),
        ("perfusion_prob_high", result.prob_high_map()),
    ];
    for (name, map) in maps {
        write_file(&out.join(format!("{name}.csv")), &map.format(name))?;
    }
    let abscissas = result.grid.abscissas();
    for (j, v) in result.voxels.iter().enumerate() {
        if let Some(mean) = &v.mean {
            let mut s = format!("# kbar voxel={j} n_q={}\n", mean.len());
            for (t, k) in abscissas.iter().zip(mean) {
                let _ = writeln!(s, "{t},{k}");
            }
            write_file(&out.join(format!("kbar_voxel_{j}.csv")), &s)?;
        }
        if let Some(history) = &v.history {
            let mut s = format!(
                "# history voxel={j} n_obs={} n_q={}\n",
                history.len(),
                abscissas.len()
            );
            for (i, row) in history.iter().enumerate() {
                let _ = write!(s, "{}", result.grid.observation_time(i + 1));
                for k in row {
                    let _ = write!(s, ",{k}");
                }
                s.push('\n');
            }
            write_file(&out.join(format!("history_voxel_{j}.csv")), &s)?;
        }
    }
    Ok(())
}

pub struct AssimilateArgs<'a> {
    pub data: Option<&'a Path>,
    pub config: &'a Path,
    pub out: Option<&'a Path>,
    pub history: bool,
    pub jobs: Option<usize>,
}

pub fn cmd_assimilate(args: AssimilateArgs<'_>) -> CliResult<()> {
    let mut cfg = read_config(args.config)?;
    if args.history {
        cfg.record_history = true;
    }
    if let Some(j) = args.jobs {
        if j == 0 {
            return Err(CliError::Validation("--jobs must be at least 1".into()));
        }
        cfg.jobs = j;
    }
    let data_dir = args
        .data
        .map(Path::to_path_buf)
        .or(cfg.data.clone())
        .ok_or_else(|| CliError::Validation("no dataset directory given".into()))?;
    let out = args
        .out
        .map(Path::to_path_buf)
        .or(cfg.out.clone())
        .ok_or_else(|| CliError::Validation("no output directory given".into()))?;
    let data = io::read_dataset(&data_dir)?;
    let result = assimilate_dataset(&data, &cfg)?;
    write_slice(&out, &result)
}

pub fn cmd_study(kind: Option<&str>, config: &Path, out: Option<&Path>, seeds: Option<usize>) -> CliResult<()> {
    let cfg = read_config(config)?;
    let kind = kind
        .map(str::to_string)
        .or(cfg.kind.clone())
        .ok_or_else(|| CliError::Validation("no study kind given".into()))?;
    let kind: StudyKind = kind.parse()?;
    let out = out
        .map(Path::to_path_buf)
        .or(cfg.out.clone())
        .ok_or_else(|| CliError::Validation("no output directory given".into()))?;
    let seeds = seeds.unwrap_or(10);
    if seeds == 0 {
        return Err(CliError::Validation("--seeds must be at least 1".into()));
    }
    let report = run_study(kind, &cfg, seeds)?;
    ensure_dir(&out)?;
    for series in &report.series {
        write_file(&out.join(format!("{}.csv", series.name)), &series.format(kind))?;
    }
    Ok(())
}
