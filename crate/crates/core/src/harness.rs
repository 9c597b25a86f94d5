//! Subcommand orchestration: every run writes CSVs with a manifest and a
//! plain-text summary into the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::coefficients::{validate_hypotheses, ModelSpec, SamplingBox};
use crate::config::ExperimentConfig;
use crate::ergodic::{
    gap_fit, invariance_check, moment, poincare_report, sample_invariant, uniform_gradient_decay, EmpiricalMeasure,
    GapFit, InvariantConfig,
};
use crate::error::{Error, Result};
use crate::flows::evolve_primary;
use crate::identity::{
    check_carre_resolvent, check_energy_identity, check_ito_e, energy_profile, ladder_monotone, ladder_sweep,
    one_mode_coefficients, scalar_carre_oracle, square_identity_residual, CarreBudget, EnergyBudget, IdentityReport,
    LadderAxis, ScalarGenerator,
};
use crate::mc::with_threads;
use crate::observable::{Observable, ScalarFn};
use crate::output::{num, write_csv, Manifest};
use crate::semigroup::{compare_gradients, FiniteModel, Quadrature};
use crate::spectral::Field;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Validate,
    Simulate,
    Gradient,
    Carre,
    Ito,
    Ergodic,
    Poincare,
    Gap,
    Ladder,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Simulate => "simulate",
            Command::Gradient => "gradient",
            Command::Carre => "carre",
            Command::Ito => "ito",
            Command::Ergodic => "ergodic",
            Command::Poincare => "poincare",
            Command::Gap => "gap",
            Command::Ladder => "ladder",
        }
    }
}

/// Result of one subcommand.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    /// Every assertion of the subcommand held.
    pub passed: bool,
    pub files: Vec<PathBuf>,
    pub summary: Vec<String>,
}

/// Process exit code: 0 on success, 1 on failed assertions or runtime
/// errors, 2 on configuration errors, 3 on hypothesis violations.
pub fn exit_code(r: &Result<Outcome>) -> i32 {
    match r {
        Ok(o) if o.passed => 0,
        Ok(_) => 1,
        Err(Error::Config(_)) => 2,
        Err(Error::HypothesisViolation(_)) => 3,
        Err(_) => 1,
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    hash: String,
    outcome: Outcome,
}

impl Ctx<'_> {
    fn manifest(&self, cmd: &str) -> Manifest {
        Manifest::new(cmd, self.cfg.run.seed, &self.hash)
            .with("preset", format!("{:?}", self.cfg.model.preset))
            .with("grid", self.cfg.model.grid)
            .with("noise_modes", self.cfg.model.noise_modes)
            .with("dt", num(self.cfg.run.dt))
    }

    fn csv(&mut self, name: &str, cmd: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let path = self.out.join(name);
        write_csv(&path, &self.manifest(cmd), header, rows)?;
        self.outcome.files.push(path);
        Ok(())
    }

    fn line(&mut self, s: String) {
        self.outcome.summary.push(s);
    }

    fn fail_unless(&mut self, ok: bool) {
        self.outcome.passed &= ok;
    }
}

/// Runs `cmd` on a pool of `cfg.run.threads` workers and writes into `out`.
pub fn run(cmd: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let model = cfg.model.build()?;
    fs::create_dir_all(out)?;
    let mut ctx = Ctx { cfg, out, hash: cfg.hash(), outcome: Outcome { passed: true, ..Default::default() } };
    with_threads(cfg.run.threads, || -> Result<()> {
        match cmd {
            Command::Validate => validate(&mut ctx, &model),
            Command::Simulate => simulate_cmd(&mut ctx, &model),
            Command::Gradient => gradient_cmd(&mut ctx, &model),
            Command::Carre => carre_cmd(&mut ctx, &model),
            Command::Ito => ito_cmd(&mut ctx, &model),
            Command::Ergodic => ergodic_cmd(&mut ctx, &model),
            Command::Poincare => poincare_cmd(&mut ctx, &model),
            Command::Gap => gap_cmd(&mut ctx, &model),
            Command::Ladder => ladder_cmd(&mut ctx, &model),
        }
    })??;
    let mut text = String::new();
    for l in &ctx.outcome.summary {
        let _ = writeln!(text, "{l}");
    }
    let _ = writeln!(text, "{}: {}", cmd.name(), if ctx.outcome.passed { "PASS" } else { "FAIL" });
    let p = out.join(format!("{}_summary.txt", cmd.name()));
    fs::write(&p, text)?;
    ctx.outcome.files.push(p);
    Ok(ctx.outcome)
}

fn validate(ctx: &mut Ctx, model: &ModelSpec) -> Result<()> {
    let rep = validate_hypotheses(model, &SamplingBox::default());
    let rows: Vec<Vec<String>> = rep
        .items
        .iter()
        .map(|i| {
            vec![
                i.id.to_string(),
                i.pass.to_string(),
                i.skipped.to_string(),
                i.detail.clone(),
                i.witness.map(|w| format!("{};{}", num(w.0), num(w.1))).unwrap_or_default(),
            ]
        })
        .collect();
    ctx.csv("hypotheses.csv", "validate", &["id", "pass", "skipped", "detail", "witness"], &rows)?;
    for i in &rep.items {
        ctx.line(format!("{:10} {} {}", i.id, if i.pass { "ok  " } else { "FAIL" }, i.detail));
    }
    if !rep.all_pass() {
        let failed: Vec<&str> = rep.items.iter().filter(|i| !i.pass).map(|i| i.id).collect();
        return Err(Error::HypothesisViolation(format!("failed items: {}", failed.join(", "))));
    }
    Ok(())
}

fn start_state(ctx: &Ctx, model: &ModelSpec) -> Result<Field> {
    let e1 = model.grid.mode(1)?;
    Ok(&e1 * ctx.cfg.checks.states.first().copied().unwrap_or(0.0))
}

fn simulate_cmd(ctx: &mut Ctx, model: &ModelSpec) -> Result<()> {
    let r = &ctx.cfg.run;
    let snaps = if r.snapshots.is_empty() {
        let k = (r.horizon / 0.1).round() as usize;
        (0..=k).map(|i| (i as f64 * 0.1).min(r.horizon)).collect()
    } else {
        r.snapshots.clone()
    };
    let sc = ctx.cfg.stream();
    let cfg = sc.scheme(r.horizon, snaps)?;
    let x = start_state(ctx, model)?;
    let b = evolve_primary(model, &x, &cfg, &sc.stream(model.noise_modes, 0)?)?;
    let n = model.grid.len();
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|j| format!("u{j}")));
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = b
        .times
        .iter()
        .zip(&b.u_path)
        .map(|(t, u)| std::iter::once(num(*t)).chain(u.values().iter().map(|v| num(*v))).collect())
        .collect();
    ctx.csv("paths.csv", "simulate", &h, &rows)?;
    ctx.line(format!("{} snapshots, sup |u|_E = {:.6e}", b.times.len(), b.sup_norm));
    Ok(())
}

fn observable(ctx: &Ctx, model: &ModelSpec) -> Result<Observable> {
    ctx.cfg.observable.build(model.grid)
}

fn gradient_cmd(ctx: &mut Ctx, model: &ModelSpec) -> Result<()> {
    let full;
    let model = if model.noise_modes < model.grid.len() {
        ctx.line(format!("noise raised from {} to {} modes for the BEL weight", model.noise_modes, model.grid.len()));
        full = model.clone().with_noise_modes(model.grid.len())?;
        &full
    } else {
        model
    };
    let phi = observable(ctx, model)?;
    let h = model.grid.mode(1)?;
    let sc = ctx.cfg.stream();
    let b = &ctx.cfg.budgets;
    let mut rows = Vec::new();
    let mut all = true;
    for (sid, (xid, x)) in ctx.cfg.states(model.grid)?.into_iter().enumerate() {
        for (tid, &t) in ctx.cfg.checks.times.iter().enumerate() {
            let c = compare_gradients(
                model,
                &phi,
                &x,
                t,
                &h,
                b.fd_eps,
                b.trajectories,
                &sc.with_sub((sid * 100 + tid) as u64),
            )?;
            let z_bt = c.bel_minus_tangent.mean.abs() / c.bel_minus_tangent.std_error;
            let z_ft = (c.fd_minus_tangent.mean.abs() - c.fd_bias_budget).max(0.0) / c.fd_minus_tangent.std_error;
            let ok = z_bt <= 3.0 && z_ft <= 3.0;
            all &= ok;
            rows.push(vec![
                xid.clone(),
                num(t),
                num(c.bel.mean),
                num(c.bel.std_error),
                num(c.tangent.mean),
                num(c.tangent.std_error),
                num(c.fd.mean),
                num(c.fd.std_error),
                num(c.fd_bias_budget),
                num(z_bt),
                num(z_ft),
                ok.to_string(),
            ]);
            ctx.line(format!(
                "x={xid} t={t}: bel {:.5}±{:.5} tangent {:.5}±{:.5} fd {:.5}±{:.5} {}",
                c.bel.mean,
                c.bel.std_error,
                c.tangent.mean,
                c.tangent.std_error,
                c.fd.mean,
                c.fd.std_error,
                if ok { "ok" } else { "FAIL" }
            ));
        }
    }
    ctx.csv(
        "gradient.csv",
        "gradient",
        &[
            "x",
            "t",
            "bel",
            "bel_se",
            "tangent",
            "tangent_se",
            "fd",
            "fd_se",
            "fd_bias",
            "z_bel_tangent",
            "z_fd_tangent",
            "pass",
        ],
        &rows,
    )?;
    ctx.fail_unless(all);
    Ok(())
}

fn report_rows(reports: &[IdentityReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|r| {
            vec![
                r.identity.clone(),
                r.x_id.clone(),
                num(r.lhs.mean),
                num(r.rhs.mean),
                num(r.joint_std_error),
                num(r.tolerance),
                r.pass.to_string(),
                r.inconclusive.to_string(),
                r.notes.clone(),
            ]
        })
        .collect()
}

const REPORT_HEADER: [&str; 9] = ["identity", "x", "lhs", "rhs", "se", "tolerance", "pass", "inconclusive", "notes"];

fn report_line(r: &IdentityReport) -> String {
    format!(
        "{} x={}: lhs {:.6} rhs {:.6} diff {:.2e} se {:.2e} tol {:.1e} {}",
        r.identity,
        r.x_id,
        r.lhs.mean,
        r.rhs.mean,
        r.discrepancy,
        r.joint_std_error,
        r.tolerance,
        if r.inconclusive {
            "INCONCLUSIVE"
        } else if r.pass {
            "pass"
        } else {
            "FAIL"
        }
    )
}

/// One-mode models are checked against the deterministic scalar oracle
/// within `1e-3`; otherwise the nested Monte Carlo estimator runs.
fn carre_cmd(ctx: &mut Ctx, model: &ModelSpec) -> Result<()> {
    let phi = observable(ctx, model)?;
    let lambda = ctx.cfg.checks.lambda;
    let reports = if model.noise_modes == 1 {
        let (b, s) = one_mode_coefficients(model)?;
        let gen = ScalarGenerator::new(b, s, 4.0, 4001);
        let chi = match &phi {
            Observable::Cylindrical { chi, .. } => *chi,
            _ => return Err(Error::Config("the one-mode oracle needs a cylindrical observable on e1".into())),
        };
        let rows = scalar_carre_oracle(&gen, |x| chi.value(x), lambda, &ctx.cfg.checks.states);
        rows.iter()
            .map(|r| {
                IdentityReport::new(
                    "carre_oracle",
                    &format!("{}e1", r.x0),
                    crate::mc::MCEstimate::exact(r.lhs, 0),
                    crate::mc::MCEstimate::exact(r.rhs, 0),
                    0.0,
                    1e-3,
                )
                .with_notes(format!("opposite-sign rhs {:.6e}", r.rhs_plus_gamma))
            })
            .collect()
    } else {
        let b = &ctx.cfg.budgets;
        let budget = CarreBudget { lhs_paths: 2 * b.outer, outer: b.outer, inner: 2, quadrature: b.quadrature() };
        match check_carre_resolvent(model, &phi, lambda, &ctx.cfg.states(model.grid)?, &budget, &ctx.cfg.stream()) {
            Ok(r) => r,
            Err(Error::Budget(why)) => vec![IdentityReport::inconclusive("carre_resolvent", "all", why)],
            Err(e) => return Err(e),
        }
    };
    for r in &reports {
        ctx.line(report_line(r));
        ctx.fail_unless(r.pass);
    }
    ctx.csv("carre.csv", "carre", &REPORT_HEADER, &report_rows(&reports))
}

fn ito_cmd(ctx: &mut Ctx, model: &ModelSpec) -> Result<()> {
    let ch = &ctx.cfg.checks;
    let truncated = model.clone().with_truncation(Some(ch.ito_truncation))?;
    let fm = FiniteModel::new(truncated, ch.ito_modes)?;
    let g = model.grid;
    let phi = Observable::Product { w1: g.mode(1)?, w2: g.mode(2.min(g.len()))? };
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    let e1 = g.mode(1)?;
    let e2 = g.mode(2)?;
    for (xid, x) in ctx.cfg.states(g)? {
        let x = &x + &(&e2 * 0.5);
        for psi in [&phi, &Observable::cylindrical(ScalarFn::Tanh, e1.clone())] {
            let r = square_identity_residual(&fm, psi, &x)?;
            worst = worst.max(r.abs());
            rows.push(vec!["square".into(), xid.clone(), psi.name(), num(r)]);
        }
    }
    ctx.csv("square_identity.csv", "ito", &["identity", "x", "observable", "residual"], &rows)?;
    let gate = worst <= 1e-10;
    ctx.line(format!("square identity: max residual {worst:.3e} ({})", if gate { "pass" } else { "FAIL" }));
    ctx.fail_unless(gate);
    if !gate {
        return Ok(());
    }
    let x = &e1 + &(&e2 * 0.5);
    let r = check_ito_e(&fm, &phi, &x, ch.ito_t, ctx.cfg.budgets.trajectories, &ctx.cfg.stream())?;
    ctx.line(report_line(&r));
    ctx.fail_unless(r.pass);
    ctx.csv("ito.csv", "ito", &REPORT_HEADER, &report_rows(&[r]))
}

fn measure(ctx: &mut Ctx, model: &ModelSpec) -> Result<EmpiricalMeasure> {
    let e = &ctx.cfg.ergodic;
    if let Some(f) = &e.measure_file {
        return EmpiricalMeasure::load(Path::new(f), &ctx.hash);
    }
    let ic =
        InvariantConfig { burn_in: e.burn_in, thin: e.thin, samples_per_chain: e.samples_per_chain, chains: e.chains };
    let mu = sample_invariant(model, &ic, &ctx.cfg.stream().with_sub(1 << 32))?;
    let path = ctx.out.join("measure.csv");
    mu.save(&path, &ctx.hash)?;
    ctx.outcome.files.push(path);
    if let Some(m) = &mu.mixing {
        ctx.line(format!(
            "mixing: <u,e1> from 0 {:.5}±{:.5}, from 2e1 {:.5}±{:.5}, z = {:.2}",
            m.from_zero.mean, m.from_zero.std_error, m.from_two_e1.mean, m.from_two_e1.std_error, m.z
        ));
    }
    Ok(mu)
}

fn ergodic_cmd(ctx: &mut Ctx, model: &ModelSpec) -> Result<()> {
    let mu = measure(ctx, model)?;
    let mut rows = Vec::new();
    for &p in &ctx.cfg.ergodic.moments.clone() {
        let full = moment(&mu, p)?;
        let half = moment(&mu.prefix(mu.len() / 2), p)?;
        let drift = (full.mean - half.mean).abs() / full.mean.abs().max(f64::MIN_POSITIVE);
        ctx.line(format!(
            "moment p={p}: {:.5}±{:.5} (half-sample drift {:.2}%)",
            full.mean,
            full.std_error,
            100.0 * drift
        ));
        rows.push(vec![num(p), num(full.mean), num(full.std_error), num(half.mean), num(drift)]);
    }
    ctx.csv("moments.csv", "ergodic", &["p", "moment", "se", "half_sample_moment", "relative_drift"], &rows)?;

    let phi = observable(ctx, model)?;
    let sc = ctx.cfg.stream().with_sub(2 << 32);
    let mut reports = Vec::new();
    for &t in &[0.1, 0.5] {
        reports.push(invariance_check(model, &mu, &phi, t, &sc.with_offset((t * 1e6) as u64))?);
    }
    let energy_budget = EnergyBudget { inner: ctx.cfg.budgets.inner, stride: 1 };
    let t = ctx.cfg.checks.energy_t;
    reports.push(check_energy_identity(model, &phi, t, &mu, &energy_budget, &sc.with_sub(3 << 32))?);
    for r in &reports {
        ctx.line(report_line(r));
        ctx.fail_unless(r.pass);
    }
    ctx.csv("ergodic_identities.csv", "ergodic", &REPORT_HEADER, &report_rows(&reports))?;

    let times = [0.0, 0.25, 0.5, 1.0];
    let prof = energy_profile(model, &phi, &times, &mu, ctx.cfg.budgets.inner.min(32), &sc.with_sub(4 << 32))?;
    let rows: Vec<Vec<String>> =
        times.iter().zip(&prof.values).map(|(t, v)| vec![num(*t), num(v.mean), num(v.std_error)]).collect();
    ctx.csv("energy_profile.csv", "ergodic", &["t", "mean_pt_phi_sq", "se"], &rows)?;
    ctx.line(format!("energy profile non-increasing within 3 SE: {}", prof.monotone));
    ctx.fail_unless(prof.monotone);
    Ok(())
}

/// Ten cylindrical observables on the first modes with bounded profiles.
pub fn poincare_family(model: &ModelSpec) -> Result<Vec<Observable>> {
    let g = model.grid;
    let mut fam = Vec::new();
    for k in 1..=2usize.min(g.len()) {
        for chi in [ScalarFn::Identity, ScalarFn::Tanh, ScalarFn::Sin, ScalarFn::Atan, ScalarFn::Cos] {
            fam.push(Observable::cylindrical(chi, g.mode(k)?));
        }
    }
    Ok(fam)
}

fn poincare_cmd(ctx: &mut Ctx, model: &ModelSpec) -> Result<()> {
    let mu = measure(ctx, model)?;
    let fam = poincare_family(model)?;
    let rep = poincare_report(&mu, &fam, ctx.cfg.budgets.bootstrap, ctx.cfg.run.seed)?;
    let rows: Vec<Vec<String>> = rep
        .rows
        .iter()
        .map(|r| {
            vec![r.name.clone(), num(r.variance), num(r.energy), r.ratio.map(num).unwrap_or_default(), r.note.clone()]
        })
        .collect();
    ctx.csv("poincare.csv", "poincare", &["observable", "variance", "energy", "ratio", "note"], &rows)?;
    ctx.line(format!("rho_hat = {:.6e} ± {:.2e}", rep.rho_hat, rep.rho_se));
    ctx.fail_unless(rep.rho_hat.is_finite() && rep.rows.iter().filter_map(|r| r.ratio).all(|r| r <= rep.rho_hat));
    Ok(())
}

fn gap_rows(fit: &GapFit) -> Vec<Vec<String>> {
    fit.t_grid
        .iter()
        .zip(&fit.d)
        .map(|(t, d)| vec![num(*t), num(d.mean), num(d.std_error), fit.fitted.contains(t).to_string()])
        .collect()
}

fn gap_cmd(ctx: &mut Ctx, model: &ModelSpec) -> Result<()> {
    let mu = measure(ctx, model)?;
    let phi = observable(ctx, model)?;
    let sc = ctx.cfg.stream().with_sub(5 << 32);
    let fit =
        gap_fit(model, &mu, &phi, &ctx.cfg.ergodic.gap_times, ctx.cfg.budgets.inner, ctx.cfg.budgets.bootstrap, &sc)?;
    ctx.csv("gap.csv", "gap", &["t", "d", "se", "fitted"], &gap_rows(&fit))?;
    match fit.delta_hat {
        None => ctx.line("already equilibrated: every d(t) is consistent with 0".into()),
        Some(d) => {
            let rho = poincare_report(&mu, &poincare_family(model)?, 0, 0)?.rho_hat;
            let (a, b) = GapFit::thresholds(model.diffusion.beta_g, rho);
            ctx.line(format!(
                "delta_hat = {d:.4} ± {:.4}, R^2 = {:.4}; beta^2/rho = {a:.4}, beta^2/(2 rho) = {b:.4} (reported only)",
                fit.delta_se, fit.r2
            ));
            ctx.fail_unless(d > 2.0 * fit.delta_se && fit.r2 >= 0.9);
        }
    }
    let e1 = model.grid.mode(1)?;
    let decay = uniform_gradient_decay(
        model,
        &phi,
        &[0.0, 0.05, 0.1, 0.2],
        &[model.grid.zeros(), e1.clone()],
        std::slice::from_ref(&e1),
        ctx.cfg.budgets.trajectories.min(2000),
        &sc.with_sub(6 << 32),
    )?;
    let rows: Vec<Vec<String>> =
        decay.t_grid.iter().zip(&decay.sup).map(|(t, s)| vec![num(*t), num(s.mean), num(s.std_error)]).collect();
    ctx.csv("gradient_decay.csv", "gap", &["t", "sup_gradient", "se"], &rows)?;
    ctx.line(format!(
        "gradient decay theta_hat = {:.4} (R^2 {:.4}), monotone {}",
        decay.theta_hat, decay.r2, decay.monotone
    ));
    Ok(())
}

fn ladder_cmd(ctx: &mut Ctx, model: &ModelSpec) -> Result<()> {
    let l = &ctx.cfg.ladder;
    let phi = observable(ctx, model)?;
    let x = &model.grid.mode(1)? * l.start;
    let sc = ctx.cfg.stream().with_sub(7 << 32);
    let q = Quadrature::build(ctx.cfg.checks.lambda, phi.sup(), &ctx.cfg.budgets.quadrature(), sc.dt)?;
    let base = model.clone().with_truncation(None)?.with_yosida(None)?;
    let modes: Vec<f64> = l.noise_modes.iter().filter(|&&m| m <= model.grid.len()).map(|&m| m as f64).collect();
    let axes = [
        (LadderAxis::Truncation, l.truncation.clone()),
        (LadderAxis::NoiseModes, modes),
        (LadderAxis::Yosida, l.yosida_k.clone()),
    ];
    let mut rows = Vec::new();
    for (axis, levels) in axes {
        let res = ladder_sweep(&base, &phi, &x, axis, &levels, l.horizon, &q, l.trajectories, &sc)?;
        let pd: Vec<f64> = res.iter().map(|r| r.path_distance.mean).collect();
        let rd: Vec<f64> = res.iter().map(|r| r.resolvent_distance.mean).collect();
        let violations: usize = res.iter().map(|r| r.identity_violations).sum();
        let ok = ladder_monotone(&pd) && ladder_monotone(&rd) && violations == 0;
        for r in &res {
            rows.push(vec![
                axis.name().into(),
                num(r.level),
                num(r.path_distance.mean),
                num(r.path_distance.std_error),
                num(r.resolvent_distance.mean),
                num(r.resolvent_distance.std_error),
                r.identity_region.to_string(),
                r.identity_violations.to_string(),
            ]);
        }
        ctx.line(format!(
            "{} ladder {:?}: path {:?} resolvent {:?} identity violations {} {}",
            axis.name(),
            levels,
            pd.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>(),
            rd.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>(),
            violations,
            if ok { "pass" } else { "FAIL" }
        ));
        ctx.fail_unless(ok);
    }
    ctx.csv(
        "ladder.csv",
        "ladder",
        &[
            "axis",
            "level",
            "path_distance",
            "path_se",
            "resolvent_distance",
            "resolvent_se",
            "identity_region",
            "identity_violations",
        ],
        &rows,
    )
}
