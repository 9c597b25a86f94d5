use std::path::Path;
use std::process::{Command, Output};

use rdspde::output::read_csv;
use rdspde::spectral::{heat_semigroup, Field, Grid};

fn rdspde(args: &[&str], config: Option<&str>, dir: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rdspde"));
    cmd.args(args).arg("--out").arg(dir.join("out")).env_remove("RDSPDE_SEED");
    if let Some(text) = config {
        let p = dir.join("cfg.toml");
        std::fs::write(&p, text).unwrap();
        cmd.arg("--config").arg(p);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_default_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = rdspde(&["validate"], None, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("validate: PASS"));
    let (header, rows) = read_csv(&dir.path().join("out/hypotheses.csv")).unwrap();
    assert_eq!(header, ["id", "pass", "skipped", "detail", "witness"]);
    assert!(!rows.is_empty());
}

#[test]
fn noiseless_linear_model_follows_heat_semigroup() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[model]\npreset = \"ou-linear\"\ngrid = 24\nnoise_modes = 24\nou_a = 0.0\nou_sigma = 0.0\n\
               [run]\nhorizon = 0.5\ndt = 0.01\n[checks]\nstates = [1.5]\n";
    let o = rdspde(&["simulate", "--threads", "2"], Some(cfg), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&dir.path().join("out/paths.csv")).unwrap();
    assert_eq!(header.len(), 25);
    assert_eq!(rows.len(), 6);
    let g = Grid::new(24).unwrap();
    let x = &g.mode(1).unwrap() * 1.5;
    for r in &rows {
        let t: f64 = r[0].parse().unwrap();
        let u = Field::new(g, r[1..].iter().map(|v| v.parse().unwrap()).collect()).unwrap();
        let exact = heat_semigroup(&x, t).unwrap();
        assert!((&u - &exact).sup_norm() < 1e-12, "t = {t}");
    }
}

#[test]
fn seed_flag_changes_paths_and_threads_do_not() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[model]\ngrid = 16\nnoise_modes = 16\n[run]\nhorizon = 0.2\n";
    let read = |args: &[&str]| {
        let o = rdspde(args, Some(cfg), dir.path());
        assert_eq!(o.status.code(), Some(0));
        read_csv(&dir.path().join("out/paths.csv")).unwrap().1
    };
    let a = read(&["simulate", "--seed", "4", "--threads", "1"]);
    let b = read(&["simulate", "--seed", "4", "--threads", "4"]);
    let c = read(&["simulate", "--seed", "5", "--threads", "1"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = rdspde(&["validate"], Some("[model]\ngird = 3\n"), dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    let o = rdspde(&["validate"], Some("[model]\ngrid = 8\nnoise_modes = 9\n"), dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = rdspde(&["simulate"], Some("[run]\ndt = -1.0\n"), dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn hypothesis_violation_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = rdspde(&["validate"], Some("[model]\npreset = \"ou-linear\"\nou_sigma = 0.0\n"), dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stdout(&o));
}

#[test]
fn unknown_subcommand_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = rdspde(&["frobnicate"], None, dir.path());
    assert!(!o.status.success());
}
