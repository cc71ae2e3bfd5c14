use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stopped_langevin::config::config_hash;
use stopped_langevin::report::{
    read_rows, read_samples, EnsembleRow, ErrorRow, LyapunovRow, OrderFitRow, RichardsonRow,
    RunManifest,
};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stopped-langevin"))
}

fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn write_cfg(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.cfg");
    fs::write(&p, text).unwrap();
    p
}

const HARMONIC: &str = "\
potential.kind = harmonic
scheme.delta = 0.05
scheme.l = 0.5
run.n_chains = 300
run.n_steps = 100
run.seed = 4
run.init_x = 1
observables = hamiltonian, first_coordinate, x0^2
";

#[test]
fn simulate_writes_both_csvs_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), HARMONIC);
    let out = dir.path().join("out");
    let o = run("simulate", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<EnsembleRow> = read_rows(&out.join("ensemble.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.ci95 >= 0.0 && r.escape_count == 0));
    let samples = read_samples(&out.join("samples.csv")).unwrap();
    assert_eq!(samples.observables, vec!["hamiltonian", "first_coordinate", "x0^2"]);
    assert_eq!(samples.rows.len(), 300 * 101);
    let m = RunManifest::read(&out).unwrap();
    assert_eq!(m.config_hash, format!("{:016x}", config_hash(HARMONIC.as_bytes())));
    assert_eq!(m.master_seed, 4);
    assert_eq!(m.outputs, vec!["samples.csv", "ensemble.csv"]);
    let files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.iter().filter(|f| *f == "manifest.json").count(), 1);
}

#[test]
fn time_average_mode() {
    let dir = tempfile::tempdir().unwrap();
    let text = HARMONIC.replace("run.n_chains = 300", "run.n_chains = 1\nrun.average = time")
        .replace("run.n_steps = 100", "run.n_steps = 20000");
    let cfg = write_cfg(dir.path(), &text);
    let o = run("simulate", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<EnsembleRow> = read_rows(&dir.path().join("ensemble.csv")).unwrap();
    assert!(rows[0].ci95.is_finite() && rows[0].ci95 > 0.0);
    let many = write_cfg(dir.path(), &text.replace("run.n_chains = 1", "run.n_chains = 2"));
    assert_eq!(run("simulate", &many, dir.path(), &[]).status.code(), Some(2));
}

#[test]
fn misspelled_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &format!("{HARMONIC}scheme.deltta = 0.1\n"));
    let o = run("simulate", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("scheme.deltta"));
}

#[test]
fn missing_config_file_and_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("simulate", &dir.path().join("nope.cfg"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin().arg("simulate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin().arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let cfg = write_cfg(dir.path(), HARMONIC);
    assert_eq!(run("simulate", &cfg, dir.path(), &["--threads", "0"]).status.code(), Some(2));
}

#[test]
fn engineered_collision_exits_with_escape() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("simulate", &example("lj_collision.cfg"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("escaped") && err.contains("first escape at step 1"), "{err}");
    assert!(RunManifest::read(dir.path()).is_ok());
}

#[test]
fn overflowing_aggregate_exits_with_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &HARMONIC.replace("x0^2\n", "exp_bh(1000)\n"));
    let o = run("simulate", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

const WEAK: &str = "\
potential.kind = harmonic
scheme.delta = 0.1
scheme.l = 0.5
run.n_chains = 2000
run.seed = 8
run.init_x = 1
run.init_y = 1
analysis.t = 1
analysis.delta_grid = 0.1, 0.05, 0.025
";

#[test]
fn weak_error_outputs_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), WEAK);
    let o = run("weak-error", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<ErrorRow> = read_rows(&dir.path().join("weak_error.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.n_steps).collect::<Vec<_>>(), vec![10, 20, 40]);
    let fits: Vec<OrderFitRow> = read_rows(&dir.path().join("order_fit.csv")).unwrap();
    assert_eq!(fits[0].quantity, "weak_error");
    assert_eq!(fits[1].quantity, "richardson");
    let rich: Vec<RichardsonRow> = read_rows(&dir.path().join("richardson.csv")).unwrap();
    assert_eq!(rich[0].delta_pair, "0.1/0.05");
    assert_eq!(rich.len(), 2);

    let uneven = write_cfg(dir.path(), &WEAK.replace("analysis.t = 1", "analysis.t = 0.33"));
    assert_eq!(run("weak-error", &uneven, dir.path(), &[]).status.code(), Some(2));
    let single = write_cfg(
        dir.path(),
        &WEAK.replace("0.1, 0.05, 0.025", "0.1"),
    );
    assert_eq!(run("weak-error", &single, dir.path(), &[]).status.code(), Some(2));
    let increasing = write_cfg(dir.path(), &WEAK.replace("0.1, 0.05, 0.025", "0.025, 0.05, 0.1"));
    assert_eq!(run("weak-error", &increasing, dir.path(), &[]).status.code(), Some(2));
}

#[test]
fn invariant_bias_of_a_constant_is_zero_with_na_order() {
    let dir = tempfile::tempdir().unwrap();
    let text = "\
potential.kind = harmonic
scheme.delta = 0.1
run.n_steps = 2000
analysis.observable = 1.5
analysis.delta_grid = 0.1, 0.05, 0.025
";
    let cfg = write_cfg(dir.path(), text);
    let o = run("invariant-bias", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<ErrorRow> = read_rows(&dir.path().join("invariant_bias.csv")).unwrap();
    assert!(rows.iter().all(|r| r.error == 0.0 && r.ci95 == 0.0));
    let fits: Vec<OrderFitRow> = read_rows(&dir.path().join("order_fit.csv")).unwrap();
    assert_eq!(fits[0].order, None);
    assert_eq!(fits[0].points_used, 0);
    let raw = fs::read_to_string(dir.path().join("order_fit.csv")).unwrap();
    assert!(raw.contains("invariant_bias,NA,NA,0"));
}

#[test]
fn invariant_bias_defaults_to_the_exact_gibbs_moment() {
    let dir = tempfile::tempdir().unwrap();
    let text = "\
potential.kind = harmonic
scheme.delta = 0.1
scheme.beta = 2
scheme.l = 0.5
run.n_steps = 20000
analysis.observable = x0^2
analysis.delta_grid = 0.1, 0.05, 0.025
";
    let cfg = write_cfg(dir.path(), text);
    let o = run("invariant-bias", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<ErrorRow> = read_rows(&dir.path().join("invariant_bias.csv")).unwrap();
    assert!(rows.iter().all(|r| r.reference == 0.5));
}

fn check_potential_table(text: &str) -> (i32, Vec<Vec<f64>>) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), text);
    let o = bin()
        .args(["check-potential", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    let rows = String::from_utf8_lossy(&o.stdout)
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    (o.status.code().unwrap(), rows)
}

#[test]
fn check_potential_ratio_columns() {
    let (code, rows) = check_potential_table(
        "potential.kind = harmonic\npotential.n_particles = 3\nscheme.delta = 0.01\n",
    );
    assert_eq!(code, 0);
    assert!(rows.len() > 3);
    assert!(rows.windows(2).all(|w| w[1][3] < w[0][3]));
    let (code, rows) = check_potential_table(&fs::read_to_string(example("lj_check.cfg")).unwrap());
    assert_eq!(code, 0);
    assert!(rows.windows(2).all(|w| w[1][3] < w[0][3]));
    let (code, rows) = check_potential_table(
        "potential.kind = double_well\nscheme.delta = 0.01\nanalysis.probe_energies =\n",
    );
    assert_eq!((code, rows.len()), (0, 0));
}

const PROBE: &str = "\
potential.kind = harmonic
scheme.delta = 0.001
scheme.l = 0.5
lyapunov.n_samples = 20000
lyapunov.probe_x = 0
";

#[test]
fn lyapunov_probe_at_the_minimum_is_neutral() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), PROBE);
    let o = run("lyapunov-probe", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<LyapunovRow> = read_rows(&dir.path().join("lyapunov_drift.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].vb, 1.0);
    assert!((rows[0].ratio - 1.0).abs() < 0.01, "{}", rows[0].ratio);
}

#[test]
fn lyapunov_probe_validation() {
    let dir = tempfile::tempdir().unwrap();
    let one = write_cfg(dir.path(), &PROBE.replace("20000", "1"));
    assert_eq!(run("lyapunov-probe", &one, dir.path(), &[]).status.code(), Some(2));
    let lj = "\
potential.kind = lj_confined
potential.n_particles = 2
potential.space_dim = 1
scheme.delta = 0.01
lyapunov.probe_x = 0.3, 0.3
";
    let cfg = write_cfg(dir.path(), lj);
    let o = run("lyapunov-probe", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("outside the domain"));
}

#[test]
fn lj_lyapunov_example_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("lyapunov-probe", &example("lj_lyapunov.cfg"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0));
    let rows: Vec<LyapunovRow> = read_rows(&dir.path().join("lyapunov_drift.csv")).unwrap();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| (r.evb1 + r.ci95) / r.vb < 1.0));
}

#[test]
fn lj_weak_error_shrinks_against_the_fine_step_reference() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("weak-error", &example("lj_weak.cfg"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<ErrorRow> = read_rows(&dir.path().join("weak_error.csv")).unwrap();
    let e: Vec<f64> = rows.iter().map(|r| r.error.abs()).collect();
    assert!(e[0] > e[1] && e[1] > e[2], "{e:?}");
    assert!(e[0] > e[2] + rows[0].ci95 + rows[2].ci95);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), HARMONIC);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run("simulate", &cfg, &a, &["--seed", "99"]);
    run("simulate", &cfg, &b, &[]);
    assert_eq!(RunManifest::read(&a).unwrap().master_seed, 99);
    assert_ne!(
        fs::read(a.join("ensemble.csv")).unwrap(),
        fs::read(b.join("ensemble.csv")).unwrap()
    );
}
