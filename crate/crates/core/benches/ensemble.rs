use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use perfusion_enkf::enkf::{analysis_step, forecast_step};
use perfusion_enkf::parallel::map_range;
use perfusion_enkf::phantom::{generate, PhantomSpec};
use perfusion_enkf::*;

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn filter_step(c: &mut Criterion) {
    let data = generate(&PhantomSpec::default()).unwrap();
    let rows = forward_rows(&data.aif, &data.grid).unwrap();
    let mut group = c.benchmark_group("forecast_analysis");
    group.sample_size(10);
    for (name, exec) in modes() {
        let cfg = AssimilationConfig { n_e: 2000, execution: exec, ..AssimilationConfig::reference() };
        let cov = gaussian_covariance(&data.grid, cfg.alpha, cfg.ell).unwrap();
        let factor = Arc::new(factorize(&cov, 1e-12 * cfg.alpha).unwrap());
        group.bench_function(BenchmarkId::new(name, cfg.n_e), |b| {
            let mut ens = init_ensemble(&cfg, factor.clone(), RngStream::new(1, 0)).unwrap();
            b.iter(|| {
                forecast_step(&mut ens, &data.grid);
                analysis_step(&mut ens, &rows[40], data.clean[0][40], cfg.sigma_e).unwrap();
            });
            black_box(ens.mean());
        });
    }
    group.finish();
}

fn voxel_map(c: &mut Criterion) {
    let spec = PhantomSpec { nx: 4, ny: 4, dt_obs: 1.0, noise_variance: 1.5625, ..PhantomSpec::default() };
    let data = generate(&spec).unwrap();
    let mut group = c.benchmark_group("slice_4x4");
    group.sample_size(10);
    for (name, exec) in modes() {
        let cfg = AssimilationConfig {
            n_e: 200,
            sigma_e: 1.5625,
            execution: Execution::Sequential,
            ..AssimilationConfig::reference()
        };
        let a = Assimilator::new(cfg, data.grid, &data.aif).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| {
                map_range(exec, data.noisy.len(), |j| {
                    a.run(&data.noisy[j], RngStream::new(0, 0).child(j as u64))
                        .unwrap()
                        .mean[0]
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, filter_step, voxel_map);
criterion_main!(benches);
