use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use perfusion_enkf::io::{parse_spec, read_dataset, Map};
use perfusion_enkf::phantom::PhantomSpec;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_perfusion-enkf"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn minimal_phantom_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.txt", "nx = 1\nny = 1\n");
    let out = dir.path().join("data");
    let o = run(&["phantom", "--spec", &spec, "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["aif.csv", "truth.csv", "meas_clean.csv", "meas_noisy.csv", "spec.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let echoed = parse_spec(&fs::read_to_string(out.join("spec.txt")).unwrap()).unwrap();
    assert_eq!(echoed, PhantomSpec::default());
    let back = read_dataset(&out).unwrap();
    assert_eq!(back.noisy.rows.len(), 1);
    assert_eq!(back.noisy.n_obs, 196);
}

#[test]
fn two_lesion_truth_has_three_levels() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(
        dir.path(),
        "spec.txt",
        "nx = 32\nny = 32\ndt_obs = 1\nregion = disc 10 11 6 30 6\nregion = disc 21 20 6 10 8\n",
    );
    let out = dir.path().join("data");
    assert!(run(&["phantom", "--spec", &spec, "--out", path(&out)]).status.success());
    let truth = Map::parse(&fs::read_to_string(out.join("truth.csv")).unwrap(), "truth").unwrap();
    let mut levels: Vec<u64> = truth.values.iter().map(|v| v.to_bits()).collect();
    levels.sort_unstable();
    levels.dedup();
    assert_eq!(levels.len(), 3);
}

#[test]
fn invalid_step_ratio_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.txt", "dt_obs = 0.25\ndtau = 0.1\n");
    let o = run(&["phantom", "--spec", &spec, "--out", path(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not an integer multiple"));
}

#[test]
fn malformed_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.cfg", "n_e = 50\n");
    // missing dataset
    let o = run(&["assimilate", "--data", path(&dir.path().join("none")), "--config", &cfg, "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    // corrupt measurement file
    let spec = write(dir.path(), "spec.txt", "nx = 1\nny = 1\ndt_obs = 1\n");
    let data = dir.path().join("data");
    assert!(run(&["phantom", "--spec", &spec, "--out", path(&data)]).status.success());
    fs::write(data.join("meas_noisy.csv"), "# meas n_voxel=1 n_obs=49 dt_obs=1\n1,2,oops\n").unwrap();
    let o = run(&["assimilate", "--data", path(&data), "--config", &cfg, "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("meas_noisy.csv"));
    // unknown config key
    let bad = write(dir.path(), "bad.cfg", "n_e = 50\ncolour = red\n");
    let o = run(&["study", "--kind", "dtau", "--config", &bad, "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    // unknown study and unknown flag
    assert_eq!(run(&["study", "--kind", "nope", "--config", &cfg, "--out", path(dir.path())]).status.code(), Some(2));
    assert_eq!(run(&["phantom", "--bogus"]).status.code(), Some(2));
}

#[test]
fn breakdown_exits_3_naming_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.txt", "nx = 1\nny = 1\ndt_obs = 1\n");
    let data = dir.path().join("data");
    assert!(run(&["phantom", "--spec", &spec, "--out", path(&data)]).status.success());
    let cfg = write(dir.path(), "run.cfg", "n_e = 20\nsigma0 = 1e200\n");
    let o = run(&["assimilate", "--data", path(&data), "--config", &cfg, "--out", path(&dir.path().join("o"))]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(3), "{err}");
    assert!(err.contains("voxel 0"), "{err}");
}

#[test]
fn noise_free_voxel_within_ten_percent() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.txt", "nx = 1\nny = 1\n");
    let data = dir.path().join("data");
    assert!(run(&["phantom", "--spec", &spec, "--out", path(&data)]).status.success());
    let cfg = write(dir.path(), "run.cfg", "seed = 4\n");
    let out = dir.path().join("out");
    let o = run(&["assimilate", "--data", path(&data), "--config", &cfg, "--out", path(&out), "--history"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mean = Map::parse(&fs::read_to_string(out.join("perfusion_mean.csv")).unwrap(), "perfusion_mean").unwrap();
    assert!((mean.values[0] / 60.0 - 1.0).abs() < 0.1, "{}", mean.values[0]);
    let kbar = fs::read_to_string(out.join("kbar_voxel_0.csv")).unwrap();
    assert_eq!(kbar.lines().count(), 785);
    let history = fs::read_to_string(out.join("history_voxel_0.csv")).unwrap();
    assert_eq!(history.lines().count(), 197);
}

#[test]
fn output_is_independent_of_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.txt", "nx = 3\nny = 2\ndt_obs = 1\nnoise_variance = 1.5625\nseed = 3\n");
    let data = dir.path().join("data");
    assert!(run(&["phantom", "--spec", &spec, "--out", path(&data)]).status.success());
    let cfg = write(dir.path(), "run.cfg", "n_e = 100\nsigma_e = 1.5625\nkbar_voxels = 1, 4\n");
    let outputs: Vec<_> = ["1", "4", "1"]
        .iter()
        .enumerate()
        .map(|(i, jobs)| {
            let out = dir.path().join(format!("out{i}"));
            let o = run(&["assimilate", "--data", path(&data), "--config", &cfg, "--out", path(&out), "--jobs", jobs]);
            assert!(o.status.success());
            out
        })
        .collect();
    for f in [
        "perfusion_mean.csv",
        "perfusion_prob_low.csv",
        "perfusion_prob_mid.csv",
        "perfusion_prob_high.csv",
        "kbar_voxel_1.csv",
        "kbar_voxel_4.csv",
    ] {
        let a = fs::read(outputs[0].join(f)).unwrap();
        assert_eq!(a, fs::read(outputs[1].join(f)).unwrap(), "{f}");
        assert_eq!(a, fs::read(outputs[2].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn study_writes_plot_ready_series() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "study.cfg", "n_e = 100\ndt_obs = 1\nells = 0.5, 2\n");
    let out = dir.path().join("out");
    let o = run(&["study", "--kind", "corr_length", "--config", &cfg, "--out", path(&out), "--seeds", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("corr_length.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# study kind=corr_length"));
    assert_eq!(lines.count(), 2);
}
