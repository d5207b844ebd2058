use std::sync::Arc;

use perfusion_enkf::enkf::{analysis_step_with, kalman_gain, Perturbation};
use perfusion_enkf::io::{AifFile, Map, Measurements};
use perfusion_enkf::posterior::KdeCdf;
use perfusion_enkf::*;
use proptest::prelude::*;

fn grid() -> TimeGrid {
    TimeGrid::new(6.0, 0.25, 0.5, 12).unwrap()
}

fn vec_of(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The concentration at t_i ignores the AIF after t_i.
    #[test]
    fn forward_map_is_causal(aif in vec_of(24), tail in vec_of(24), i in 1usize..=12) {
        let g = grid();
        let lag = i * g.substeps();
        let mut other = aif.clone();
        let from = (lag + 1).min(g.n_q());
        other[from..].copy_from_slice(&tail[from..]);
        let a = ForwardRow::build(&AifVector::new(aif).unwrap(), &g, i).unwrap();
        let b = ForwardRow::build(&AifVector::new(other).unwrap(), &g, i).unwrap();
        prop_assert_eq!(a.weights(), b.weights());
        prop_assert!(a.support().end <= lag + 1);
    }

    #[test]
    fn forward_map_is_linear(aif in vec_of(24), k1 in vec_of(24), k2 in vec_of(24), s in -3.0f64..3.0, t in -3.0f64..3.0) {
        let g = grid();
        let aif = AifVector::new(aif).unwrap();
        let c1 = convolve_to_observation_space(&aif, &KernelState(k1.clone()), &g).unwrap();
        let c2 = convolve_to_observation_space(&aif, &KernelState(k2.clone()), &g).unwrap();
        let mix: Vec<f64> = k1.iter().zip(&k2).map(|(a, b)| s * a + t * b).collect();
        let c = convolve_to_observation_space(&aif, &KernelState(mix), &g).unwrap();
        for ((c, a), b) in c.iter().zip(&c1).zip(&c2) {
            prop_assert!((c - (s * a + t * b)).abs() < 1e-9 * (1.0 + c.abs()));
        }
    }

    /// Without perturbations the ensemble mean follows m − u(h·m − c).
    #[test]
    fn gain_formula_for_mean(seed in any::<u64>(), i in 1usize..=12, c in -5.0f64..5.0, n_e in 3usize..40) {
        let g = grid();
        let cfg = AssimilationConfig {
            sigma0: 1.0,
            sigma_e: 0.3,
            alpha: 0.5,
            ell: 0.7,
            n_e,
            record_history: false,
            relative_jitter: 1e-12,
            execution: Execution::Sequential,
        };
        let cov = gaussian_covariance(&g, cfg.alpha, cfg.ell).unwrap();
        let factor = Arc::new(factorize(&cov, 1e-12).unwrap());
        let mut ens = init_ensemble(&cfg, factor, RngStream::new(seed, 0)).unwrap();
        let aif = AifVector::from_fn(&g, |t| (1.0 + t).recip()).unwrap();
        let row = ForwardRow::build(&aif, &g, i).unwrap();
        let m = ens.mean();
        let u = kalman_gain(&ens, &row, cfg.sigma_e).unwrap();
        let innovation = row.dot(&m) - c;
        analysis_step_with(&mut ens, &row, c, cfg.sigma_e, Perturbation::None).unwrap();
        for ((a, m), u) in ens.mean().iter().zip(&m).zip(&u) {
            let expect = m - u * innovation;
            prop_assert!((a - expect).abs() <= 1e-10 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn kde_cdf_is_monotone(values in prop::collection::vec(-50.0f64..50.0, 2..60), xs in prop::collection::vec(-80.0f64..80.0, 2..20)) {
        let s = SampleSet::new(values).unwrap();
        let cdf = KdeCdf::new(&s);
        let mut xs = xs;
        xs.sort_by(f64::total_cmp);
        let mut last = 0.0;
        for x in xs {
            let f = cdf.eval(x);
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!(f >= last);
            last = f;
        }
        prop_assert_eq!(cdf.eval(f64::NEG_INFINITY), 0.0);
        prop_assert_eq!(cdf.eval(f64::INFINITY), 1.0);
    }

    #[test]
    fn range_probability_is_additive(values in prop::collection::vec(0.0f64..70.0, 2..60), a in -10.0f64..30.0, d1 in 0.01f64..30.0, d2 in 0.01f64..30.0) {
        let s = SampleSet::new(values).unwrap();
        let (b, c) = (a + d1, a + d1 + d2);
        let sum = range_probability(&s, a, b).unwrap() + range_probability(&s, b, c).unwrap();
        prop_assert!((sum - range_probability(&s, a, c).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn files_round_trip(values in prop::collection::vec(-1e6f64..1e6, 12), dt in 0.01f64..10.0) {
        let map = Map::new(4, 3, values.clone()).unwrap();
        prop_assert_eq!(Map::parse(&map.format("m"), "m").unwrap(), map);
        let meas = Measurements::new(dt, values.chunks(4).map(<[f64]>::to_vec).collect()).unwrap();
        prop_assert_eq!(Measurements::parse(&meas.format()).unwrap(), meas);
        let aif = AifFile { t_final: dt * 12.0, times: (0..12).map(|i| i as f64 * dt).collect(), values };
        prop_assert_eq!(AifFile::parse(&aif.format()).unwrap(), aif);
    }
}

#[test]
fn sampled_covariance_matches_sigma() {
    let g = TimeGrid::new(3.0, 0.25, 0.25, 0).unwrap();
    let cov = gaussian_covariance(&g, 1.5, 0.5).unwrap();
    let factor = factorize(&cov, 1e-12).unwrap();
    let stream = RngStream::new(17, 0);
    let mut rng = stream.generator();
    let n = g.n_q();
    let draws = 100_000;
    let mut acc = vec![0.0; n * n];
    for _ in 0..draws {
        let x = stochastics::sample(&factor, 2.0, &mut rng);
        for i in 0..n {
            for j in 0..n {
                acc[i * n + j] += x[i] * x[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            let got = acc[i * n + j] / draws as f64;
            let expect = 4.0 * cov.get(i, j);
            assert!((got - expect).abs() < 0.05 * 4.0 * 1.5, "({i},{j}) {got} vs {expect}");
        }
    }
}
