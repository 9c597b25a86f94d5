use std::ffi::CStr;
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use rdspde_ffi::*;

const PI2: f64 = std::f64::consts::PI * std::f64::consts::PI;

fn new_model(preset: RdsPreset, grid: usize, modes: usize, a: f64, sigma: f64) -> (RdsStatus, *mut RdsModel) {
    let mut h = ptr::null_mut();
    let s = unsafe { rds_model_new(preset, grid, modes, a, sigma, &mut h) };
    (s, h)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(rds_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(rds_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn sine_mode(n: usize) -> Vec<f64> {
    (1..=n).map(|j| 2f64.sqrt() * (std::f64::consts::PI * j as f64 / (n + 1) as f64).sin()).collect()
}

#[test]
fn simulate_is_reproducible() {
    let (s, m) = new_model(RdsPreset::OuLinear, 16, 16, 0.0, 1.0);
    assert_eq!(s, RdsStatus::Ok, "{}", last_error());
    let n = unsafe { rds_model_grid(m) };
    assert_eq!(n, 16);
    let x0 = sine_mode(n);
    let run = |traj: u64| {
        let mut u = vec![0.0; n];
        let s = unsafe { rds_simulate(m, x0.as_ptr(), n, 0.01, 0.2, 1, traj, u.as_mut_ptr()) };
        assert_eq!(s, RdsStatus::Ok);
        u
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
    unsafe { rds_model_free(m) };
}

#[test]
fn heat_mean_through_the_abi() {
    let t = 0.2;
    let (s, m) = new_model(RdsPreset::OuLinear, 16, 16, 0.0, 1.0);
    assert_eq!(s, RdsStatus::Ok);
    let x0 = sine_mode(16);
    let (mut mean, mut se) = (0.0, 0.0);
    let s =
        unsafe { rds_estimate_pt_mode(m, x0.as_ptr(), 16, RdsChi::Identity, 1, t, 0.01, 4000, 2, &mut mean, &mut se) };
    assert_eq!(s, RdsStatus::Ok);
    let exact = (-PI2 * t).exp();
    assert!((mean - exact).abs() <= 3.0 * se, "{mean} ± {se} vs {exact}");
    unsafe { rds_model_free(m) };
}

#[test]
fn ou_mean_and_bel_gradient() {
    let (a, sigma, t) = (1.0, 1.0, 0.1);
    let (s, m) = new_model(RdsPreset::OuLinear, 16, 16, a, sigma);
    assert_eq!(s, RdsStatus::Ok);
    let (mut mean, mut se) = (0.0, 0.0);
    let s = unsafe { rds_estimate_pt_mode(m, ptr::null(), 0, RdsChi::Cos, 1, t, 0.001, 4000, 7, &mut mean, &mut se) };
    assert_eq!(s, RdsStatus::Ok);
    let c = PI2 + a;
    let v = sigma * sigma * -(-2.0 * c * t).exp_m1() / (2.0 * c);
    let exact = (-v / 2.0f64).exp();
    // Allowance covers the first-order time-step bias in the mode variance.
    assert!((mean - exact).abs() <= 3.0 * se + 1e-3, "{mean} ± {se} vs {exact}");
    // At x = 0 the gradient of an even function vanishes.
    let s =
        unsafe { rds_gradient_bel_mode(m, ptr::null(), 0, RdsChi::Cos, 1, 1, t, 0.001, 4000, 7, &mut mean, &mut se) };
    assert_eq!(s, RdsStatus::Ok);
    assert!(mean.abs() <= 3.0 * se, "{mean} ± {se}");
    unsafe { rds_model_free(m) };
}

#[test]
fn error_codes() {
    let (s, m) = new_model(RdsPreset::CubicDefault, 1, 1, 0.0, 0.0);
    assert_eq!(s, RdsStatus::InvalidArgument);
    assert!(m.is_null());
    assert!(!last_error().is_empty());

    let (s, m) = new_model(RdsPreset::OuLinear, 8, 8, -(PI2 + 1.0), 1.0);
    assert_eq!(s, RdsStatus::HypothesisViolation, "{}", last_error());
    assert!(m.is_null());

    let (s, m) = new_model(RdsPreset::CubicDefault, 8, 4, 0.0, 0.0);
    assert_eq!(s, RdsStatus::Ok);
    let (mut mean, mut se) = (0.0, 0.0);
    // BEL needs noise in every grid mode.
    let s =
        unsafe { rds_gradient_bel_mode(m, ptr::null(), 0, RdsChi::Tanh, 1, 1, 0.1, 0.01, 10, 1, &mut mean, &mut se) };
    assert_ne!(s, RdsStatus::Ok);
    let s = unsafe { rds_estimate_pt_mode(m, ptr::null(), 0, RdsChi::Tanh, 9, 0.1, 0.01, 10, 1, &mut mean, &mut se) };
    assert_eq!(s, RdsStatus::InvalidArgument);
    let s =
        unsafe { rds_estimate_pt_mode(m, ptr::null(), 0, RdsChi::Tanh, 1, 0.1, 0.01, 10, 1, ptr::null_mut(), &mut se) };
    assert_eq!(s, RdsStatus::NullPointer);
    let x = [0.0; 3];
    let mut u = [0.0; 3];
    let s = unsafe { rds_simulate(m, x.as_ptr(), 3, 0.01, 0.1, 1, 0, u.as_mut_ptr()) };
    assert_eq!(s, RdsStatus::InvalidArgument);
    let s = unsafe { rds_estimate_pt_mode(m, ptr::null(), 0, RdsChi::Tanh, 1, 0.1, 0.01, 10, 1, &mut mean, &mut se) };
    assert_eq!(s, RdsStatus::Ok);
    assert!(last_error().is_empty());
    unsafe { rds_model_free(m) };
    unsafe { rds_model_free(ptr::null_mut()) };
}

#[test]
fn blow_up_is_reported() {
    let (s, m) = new_model(RdsPreset::CubicDefault, 8, 8, 0.0, 0.0);
    assert_eq!(s, RdsStatus::Ok);
    let x = [2000.0; 8];
    let mut u = [0.0; 8];
    let s = unsafe { rds_simulate(m, x.as_ptr(), 8, 0.01, 0.1, 1, 0, u.as_mut_ptr()) };
    assert_eq!(s, RdsStatus::BlowUp, "{}", last_error());
    unsafe { rds_model_free(m) };
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn have_cc() -> bool {
    Command::new("cc").arg("--version").output().map(|o| o.status.success()).unwrap_or(false)
}

#[test]
fn header_compiles_as_c() {
    if !have_cc() {
        eprintln!("cc not found; header check skipped");
        return;
    }
    let header = crate_dir().join("include/rdspde.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "rds_model_new",
        "rds_model_free",
        "rds_simulate",
        "rds_estimate_pt_mode",
        "rds_gradient_bel_mode",
        "rds_last_error",
        "rds_version",
        "RDS_STATUS_BLOW_UP",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(&header)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

/// Static library built alongside this test, in `deps/` or its parent.
fn static_lib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let deps = exe.parent()?;
    let found =
        [Some(deps), deps.parent()].into_iter().flatten().map(|d| d.join("librdspde_ffi.a")).find(|p| p.exists());
    found
}

#[test]
fn c_program_links_and_runs() {
    let Some(lib) = static_lib().filter(|_| have_cc()) else {
        eprintln!("cc or the static library not available; link check skipped");
        return;
    };
    let dir = tempfile_dir();
    let bin = dir.join("smoke");
    let out = Command::new("cc")
        .args(["-std=c99", "-D_DEFAULT_SOURCE", "-Wall", "-Werror"])
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(crate_dir().join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}

fn tempfile_dir() -> PathBuf {
    let d = std::env::temp_dir().join(format!("rdspde-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
