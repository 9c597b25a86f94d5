//! Invariant-measure sampling and its consequences: moments, invariance,
//! Poincaré ratios, variance decay and gradient decay.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coefficients::{dissipativity_margin, ModelSpec};
use crate::error::{Error, Result};
use crate::flows::{simulate, FlowSpec};
use crate::mc::{linear_fit, mean_se, par_map, par_map_counting, sample_variance, MCEstimate};
use crate::observable::Observable;
use crate::output::{num, read_csv, write_csv, Manifest};
use crate::semigroup::{gradient_tangent, StreamConfig};
use crate::spectral::{Field, Grid};

/// Snapshots of long-run trajectories; weights are uniform.
#[derive(Clone, Debug)]
pub struct EmpiricalMeasure {
    pub samples: Vec<Field>,
    /// Chain index of each sample.
    pub chain_of: Vec<usize>,
    pub chains: usize,
    pub burn_in: f64,
    pub thin: f64,
    pub master_seed: u64,
    pub dt: f64,
    pub aborted: usize,
    pub mixing: Option<MixingDiagnostic>,
}

/// Mean of `⟨u, e₁⟩` over chains started at 0 against chains started at `2e₁`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingDiagnostic {
    pub from_zero: MCEstimate,
    pub from_two_e1: MCEstimate,
    /// `|difference| / joint_se`.
    pub z: f64,
}

impl MixingDiagnostic {
    pub fn mixed(&self) -> bool {
        self.z < 3.0
    }
}

/// Sampling schedule; `None` picks `5/α̂` and `1/α̂` with `α̂ = π² - sup f′`.
#[derive(Clone, Debug, PartialEq)]
pub struct InvariantConfig {
    pub burn_in: Option<f64>,
    pub thin: Option<f64>,
    pub samples_per_chain: usize,
    pub chains: usize,
}

impl Default for InvariantConfig {
    fn default() -> Self {
        Self { burn_in: None, thin: None, samples_per_chain: 1, chains: 512 }
    }
}

impl EmpiricalMeasure {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn grid(&self) -> Grid {
        self.samples[0].grid()
    }

    /// Degenerate measure, used for tests and closed forms.
    pub fn from_samples(samples: Vec<Field>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::domain("empirical measure needs at least one sample"));
        }
        let n = samples.len();
        Ok(Self {
            samples,
            chain_of: (0..n).collect(),
            chains: n,
            burn_in: 0.0,
            thin: 0.0,
            master_seed: 0,
            dt: 0.0,
            aborted: 0,
            mixing: None,
        })
    }

    /// Mean of `values` (one per sample) with a standard error over chain
    /// averages, so within-chain correlation is not undercounted.
    pub fn chain_estimate(&self, values: &[f64]) -> MCEstimate {
        let mut sum = vec![0.0; self.chains];
        let mut cnt = vec![0usize; self.chains];
        for (v, &c) in values.iter().zip(&self.chain_of) {
            sum[c] += v;
            cnt[c] += 1;
        }
        let per_chain: Vec<f64> = sum.iter().zip(&cnt).filter(|(_, &c)| c > 0).map(|(s, &c)| s / c as f64).collect();
        let (_, se) = mean_se(&per_chain);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        MCEstimate { mean, std_error: se, n_samples: values.len(), aborted: self.aborted, samples: None }
    }

    /// First `n` samples in chain order; used for stabilization checks.
    pub fn prefix(&self, n: usize) -> EmpiricalMeasure {
        let mut m = self.clone();
        m.samples.truncate(n);
        m.chain_of.truncate(n);
        m.mixing = None;
        m
    }

    /// Persists the samples with a manifest carrying `config_hash`.
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let manifest = Manifest::new("ergodic-measure", self.master_seed, config_hash)
            .with("burn_in", num(self.burn_in))
            .with("thin", num(self.thin))
            .with("chains", self.chains)
            .with("dt", num(self.dt))
            .with("aborted", self.aborted);
        let n = self.grid().len();
        let mut header = vec!["chain".to_string()];
        header.extend((0..n).map(|j| format!("u{j}")));
        let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = self
            .samples
            .iter()
            .zip(&self.chain_of)
            .map(|(s, c)| std::iter::once(c.to_string()).chain(s.values().iter().map(|v| num(*v))).collect())
            .collect();
        write_csv(path, &manifest, &header_ref, &rows)
    }

    /// Loads a measure written by [`EmpiricalMeasure::save`]; refuses a file
    /// produced under a different configuration.
    pub fn load(path: &Path, expected_hash: &str) -> Result<Self> {
        let m = Manifest::read(path)?;
        if m.config_hash != expected_hash {
            return Err(Error::Config(format!(
                "measure {} was sampled under config {} but {} is in use",
                path.display(),
                m.config_hash,
                expected_hash
            )));
        }
        let parse = |k: &str| -> Result<f64> {
            m.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("manifest of {} lacks {k}", path.display())))
        };
        let (header, rows) = read_csv(path)?;
        let grid = Grid::new(header.len() - 1)?;
        let mut samples = Vec::with_capacity(rows.len());
        let mut chain_of = Vec::with_capacity(rows.len());
        for r in rows {
            let bad = || Error::Config(format!("malformed row in {}", path.display()));
            chain_of.push(r[0].parse().map_err(|_| bad())?);
            let v: Vec<f64> = r[1..].iter().map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?;
            samples.push(Field::new(grid, v)?);
        }
        if samples.is_empty() {
            return Err(Error::Config(format!("{} holds no samples", path.display())));
        }
        Ok(Self {
            samples,
            chain_of,
            chains: parse("chains")? as usize,
            burn_in: parse("burn_in")?,
            thin: parse("thin")?,
            master_seed: m.seed,
            dt: parse("dt")?,
            aborted: parse("aborted")? as usize,
            mixing: None,
        })
    }
}

/// Long-run snapshots of `chains` trajectories started alternately at 0 and
/// at `2e₁`, after `burn_in` and every `thin` time units.
pub fn sample_invariant(model: &ModelSpec, cfg: &InvariantConfig, sc: &StreamConfig) -> Result<EmpiricalMeasure> {
    let alpha = dissipativity_margin(model);
    if !(alpha > 0.0) {
        return Err(Error::HypothesisViolation(format!("no dissipativity margin: pi^2 - sup f' = {alpha}")));
    }
    if cfg.chains == 0 || cfg.samples_per_chain == 0 {
        return Err(Error::Budget("invariant sampling needs at least one chain and one sample".into()));
    }
    let burn_in = cfg.burn_in.unwrap_or(5.0 / alpha);
    let thin = cfg.thin.unwrap_or(1.0 / alpha);
    if !(burn_in >= 0.0) || !(thin > 0.0) {
        return Err(Error::domain("burn-in must be >= 0 and thinning > 0"));
    }
    // Snap both to the step lattice so snapshot times are exact.
    let burn_in = (burn_in / sc.dt).round() * sc.dt;
    let thin = (thin / sc.dt).round().max(1.0) * sc.dt;
    let times: Vec<f64> = (0..cfg.samples_per_chain).map(|j| burn_in + j as f64 * thin).collect();
    let horizon = *times.last().unwrap();
    let scheme = sc.scheme(horizon, times)?;
    let e1 = model.grid.mode(1)?;
    let start_b = &e1 * 2.0;
    let zero = model.grid.zeros();
    let (chains, aborted) = par_map_counting(cfg.chains, sc.max_abort_frac, |c| {
        let x = if c % 2 == 0 { &zero } else { &start_b };
        let stream = sc.stream(model.noise_modes, c)?;
        let mut out = Vec::with_capacity(cfg.samples_per_chain);
        simulate(model, x, &FlowSpec::primary(), &scheme, &stream, |s| out.push(s.u.clone()))?;
        Ok((c as usize, out))
    })?;
    let mut samples = Vec::new();
    let mut chain_of = Vec::new();
    let mut groups: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for (k, (c, snaps)) in chains.into_iter().enumerate() {
        let m = snaps.iter().map(|s| s.inner(&e1)).sum::<f64>() / snaps.len() as f64;
        groups[c % 2].push(m);
        for s in snaps {
            samples.push(s);
            chain_of.push(k);
        }
    }
    let n_chains = groups[0].len() + groups[1].len();
    let mixing = (groups[0].len() >= 2 && groups[1].len() >= 2).then(|| {
        let a = MCEstimate::from_samples(&groups[0]);
        let b = MCEstimate::from_samples(&groups[1]);
        let z = a.z_score(&b);
        MixingDiagnostic { from_zero: a, from_two_e1: b, z }
    });
    Ok(EmpiricalMeasure {
        samples,
        chain_of,
        chains: n_chains,
        burn_in,
        thin,
        master_seed: sc.master_seed,
        dt: sc.dt,
        aborted,
        mixing,
    })
}

/// `∫|x|_E^p dμ`.
pub fn moment(measure: &EmpiricalMeasure, p: f64) -> Result<MCEstimate> {
    if !(p >= 1.0) {
        return Err(Error::domain(format!("moment order must be >= 1, got {p}")));
    }
    let v: Vec<f64> = measure.samples.iter().map(|s| s.sup_norm().powf(p)).collect();
    Ok(measure.chain_estimate(&v))
}

/// `∫|x|_H^2 dμ`, the Hilbert analogue of the second moment.
pub fn h_moment2(measure: &EmpiricalMeasure) -> MCEstimate {
    let v: Vec<f64> = measure.samples.iter().map(|s| s.inner(s)).collect();
    measure.chain_estimate(&v)
}

/// Compares `∫P_tφ dμ` with `∫φ dμ` on paired samples: one trajectory per
/// measure sample.
pub fn invariance_check(
    model: &ModelSpec,
    measure: &EmpiricalMeasure,
    phi: &Observable,
    t: f64,
    sc: &StreamConfig,
) -> Result<crate::identity::IdentityReport> {
    let cfg = sc.scheme(t, vec![t])?;
    let (rows, aborted) = par_map_counting(measure.len(), sc.max_abort_frac, |i| {
        let x = &measure.samples[i as usize];
        let stream = sc.stream(model.noise_modes, i)?;
        let end = simulate(model, x, &FlowSpec::primary(), &cfg, &stream, |_| {})?;
        Ok((i as usize, phi.eval(&end.u), phi.eval(x)))
    })?;
    let sub = EmpiricalMeasure {
        chain_of: rows.iter().map(|r| measure.chain_of[r.0]).collect(),
        samples: Vec::new(),
        ..measure.clone()
    };
    let pt: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let ph: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let d: Vec<f64> = rows.iter().map(|r| r.1 - r.2).collect();
    let mut lhs = sub.chain_estimate(&pt);
    let rhs = sub.chain_estimate(&ph);
    lhs.aborted = aborted;
    let se = sub.chain_estimate(&d).std_error;
    Ok(crate::identity::IdentityReport::new("invariance", &format!("t={t}"), lhs, rhs, se, 0.0))
}

/// One observable's Poincaré quotient.
#[derive(Clone, Debug, PartialEq)]
pub struct PoincareRow {
    pub name: String,
    pub variance: f64,
    /// `∫|Dφ|²_{E*} dμ`; for cylindrical `φ` the dual norm is `|χ′|·‖w‖_{L¹}`.
    pub energy: f64,
    /// `None` for zero-energy observables, which are excluded from the max.
    pub ratio: Option<f64>,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoincareReport {
    pub rows: Vec<PoincareRow>,
    /// Largest ratio over the family.
    pub rho_hat: f64,
    /// Chain-bootstrap standard error of `rho_hat`.
    pub rho_se: f64,
}

fn poincare_rows(values: &[Vec<f64>], energies: &[Vec<f64>], idx: &[usize]) -> Vec<(f64, f64)> {
    values
        .iter()
        .zip(energies)
        .map(|(v, e)| {
            let vs: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
            let es = idx.iter().map(|&i| e[i]).sum::<f64>() / idx.len() as f64;
            (sample_variance(&vs), es)
        })
        .collect()
}

fn max_ratio(rows: &[(f64, f64)]) -> f64 {
    rows.iter().filter(|(_, e)| *e > 0.0).map(|(v, e)| v / e).fold(0.0, f64::max)
}

/// Empirical `Var_μ φ / ∫|Dφ|²_{E*}dμ` for each observable and their maximum.
pub fn poincare_report(
    measure: &EmpiricalMeasure,
    observables: &[Observable],
    n_boot: usize,
    seed: u64,
) -> Result<PoincareReport> {
    let mut values = Vec::with_capacity(observables.len());
    let mut energies = Vec::with_capacity(observables.len());
    for phi in observables {
        values.push(measure.samples.iter().map(|x| phi.eval(x)).collect::<Vec<_>>());
        energies.push(measure.samples.iter().map(|x| phi.gradient_norm(x).map(|g| g * g)).collect::<Result<Vec<_>>>()?);
    }
    let all: Vec<usize> = (0..measure.len()).collect();
    let base = poincare_rows(&values, &energies, &all);
    let rows = observables
        .iter()
        .zip(&base)
        .map(|(phi, &(variance, energy))| PoincareRow {
            name: phi.name(),
            variance,
            energy,
            ratio: (energy > 0.0).then(|| variance / energy),
            note: if energy > 0.0 { String::new() } else { "zero Dirichlet energy; excluded".into() },
        })
        .collect();
    let rho_hat = max_ratio(&base);

    let mut by_chain: Vec<Vec<usize>> = vec![Vec::new(); measure.chains];
    for (i, &c) in measure.chain_of.iter().enumerate() {
        by_chain[c].push(i);
    }
    by_chain.retain(|v| !v.is_empty());
    let boots = par_map(n_boot, |b| {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&b.to_le_bytes());
        key[16..24].copy_from_slice(b"poincare");
        let mut rng = ChaCha8Rng::from_seed(key);
        let idx: Vec<usize> =
            (0..by_chain.len()).flat_map(|_| by_chain[rng.random_range(0..by_chain.len())].iter().copied()).collect();
        max_ratio(&poincare_rows(&values, &energies, &idx))
    });
    let rho_se = if n_boot >= 2 { sample_variance(&boots).sqrt() } else { f64::NAN };
    Ok(PoincareReport { rows, rho_hat, rho_se })
}

/// Fitted decay of `d(t) = ∫(P_tφ - φ̄)²dμ`.
#[derive(Clone, Debug, PartialEq)]
pub struct GapFit {
    pub t_grid: Vec<f64>,
    pub d: Vec<MCEstimate>,
    /// `None` when every `d(t)` is consistent with 0 ("already equilibrated").
    pub delta_hat: Option<f64>,
    pub delta_se: f64,
    pub r2: f64,
    pub equilibrated: bool,
    /// Times entering the fit.
    pub fitted: Vec<f64>,
}

impl GapFit {
    /// `β²/ρ` and `β²/(2ρ)`, reported next to `delta_hat` and asserted as neither.
    pub fn thresholds(beta: f64, rho: f64) -> (f64, f64) {
        (beta * beta / rho, beta * beta / (2.0 * rho))
    }
}

/// `d̂(t) = Var_m(P̂_m(t)) - mean_m(s²_m(t))/R`: the between-sample variance of
/// inner means, corrected by the inner Monte Carlo variance.
fn decay_values(pm: &[Vec<f64>], s2: &[Vec<f64>], r: usize, idx: &[usize]) -> Vec<f64> {
    let nt = pm[0].len();
    (0..nt)
        .map(|k| {
            let means: Vec<f64> = idx.iter().map(|&i| pm[i][k]).collect();
            let noise = idx.iter().map(|&i| s2[i][k]).sum::<f64>() / (idx.len() as f64 * r as f64);
            sample_variance(&means) - noise
        })
        .collect()
}

fn fit_log(t: &[f64], d: &[f64], keep: &[bool]) -> Option<(f64, f64)> {
    let (x, y): (Vec<f64>, Vec<f64>) =
        t.iter().zip(d).zip(keep).filter(|(_, &k)| k).map(|((t, d), _)| (*t, d.ln())).unzip();
    if x.len() < 2 || y.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let (_, b, r2) = linear_fit(&x, &y);
    Some((-b, r2))
}

/// Nested estimate of `d(t)` over `t_grid`: `inner` trajectories per measure
/// sample, the same trajectories serving every `t`, then a least-squares fit
/// of `log d(t)` on the times where `d(t)` exceeds two standard errors.
pub fn gap_fit(
    model: &ModelSpec,
    measure: &EmpiricalMeasure,
    phi: &Observable,
    t_grid: &[f64],
    inner: usize,
    n_boot: usize,
    sc: &StreamConfig,
) -> Result<GapFit> {
    if inner < 2 {
        return Err(Error::Budget("gap fit needs at least 2 inner trajectories".into()));
    }
    if t_grid.iter().any(|&t| !(t >= 0.0)) {
        return Err(Error::domain("gap fit times must be >= 0"));
    }
    let horizon = t_grid.iter().cloned().fold(0.0, f64::max);
    let cfg = sc.scheme(horizon, t_grid.to_vec())?;
    let steps = cfg.snapshot_steps();
    let idx: Vec<usize> = t_grid.iter().map(|&t| steps.binary_search(&cfg.step_of(t)).unwrap()).collect();
    let nt = t_grid.len();
    let per_sample = par_map(measure.len(), |m| -> Result<(Vec<f64>, Vec<f64>)> {
        let x = &measure.samples[m as usize];
        let mut sum = vec![0.0; nt];
        let mut sum2 = vec![0.0; nt];
        let isc = sc.with_offset(m * inner as u64);
        for r in 0..inner as u64 {
            let stream = isc.stream(model.noise_modes, r)?;
            let mut vals = Vec::with_capacity(steps.len());
            simulate(model, x, &FlowSpec::primary(), &cfg, &stream, |s| vals.push(phi.eval(&s.u)))?;
            for (k, &j) in idx.iter().enumerate() {
                sum[k] += vals[j];
                sum2[k] += vals[j] * vals[j];
            }
        }
        let rf = inner as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / rf).collect();
        let var: Vec<f64> = sum2.iter().zip(&mean).map(|(s2, m)| ((s2 - rf * m * m) / (rf - 1.0)).max(0.0)).collect();
        Ok((mean, var))
    });
    let mut pm = Vec::with_capacity(measure.len());
    let mut s2 = Vec::with_capacity(measure.len());
    for r in per_sample {
        let (a, b) = r?;
        pm.push(a);
        s2.push(b);
    }
    let all: Vec<usize> = (0..measure.len()).collect();
    let d = decay_values(&pm, &s2, inner, &all);
    let boots: Vec<Vec<f64>> = par_map(n_boot, |b| {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&sc.master_seed.to_le_bytes());
        key[8..16].copy_from_slice(&b.to_le_bytes());
        key[16..24].copy_from_slice(b"gap-boot");
        let mut rng = ChaCha8Rng::from_seed(key);
        let idx: Vec<usize> = (0..measure.len()).map(|_| rng.random_range(0..measure.len())).collect();
        decay_values(&pm, &s2, inner, &idx)
    });
    let se: Vec<f64> = (0..nt)
        .map(
            |k| if n_boot >= 2 { sample_variance(&boots.iter().map(|b| b[k]).collect::<Vec<_>>()).sqrt() } else { 0.0 },
        )
        .collect();
    let keep: Vec<bool> = d.iter().zip(&se).map(|(v, s)| *v > 0.0 && *v > 2.0 * s).collect();
    let d_est: Vec<MCEstimate> = d
        .iter()
        .zip(&se)
        .map(|(v, s)| MCEstimate { mean: *v, std_error: *s, n_samples: measure.len(), aborted: 0, samples: None })
        .collect();
    let fitted: Vec<f64> = t_grid.iter().zip(&keep).filter(|(_, &k)| k).map(|(t, _)| *t).collect();
    match fit_log(t_grid, &d, &keep) {
        None => Ok(GapFit {
            t_grid: t_grid.to_vec(),
            d: d_est,
            delta_hat: None,
            delta_se: f64::NAN,
            r2: f64::NAN,
            equilibrated: true,
            fitted,
        }),
        Some((delta, r2)) => {
            let bd: Vec<f64> = boots.iter().filter_map(|b| fit_log(t_grid, b, &keep).map(|(x, _)| x)).collect();
            let delta_se = if bd.len() >= 2 { sample_variance(&bd).sqrt() } else { f64::NAN };
            Ok(GapFit {
                t_grid: t_grid.to_vec(),
                d: d_est,
                delta_hat: Some(delta),
                delta_se,
                r2,
                equilibrated: false,
                fitted,
            })
        }
    }
}

/// `sup_{x, h} |⟨h, DP_tφ(x)⟩|` over a state set and unit directions, with an
/// exponential fit `e^{-θt}`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientDecay {
    pub t_grid: Vec<f64>,
    pub sup: Vec<MCEstimate>,
    pub theta_hat: f64,
    pub r2: f64,
    /// Every consecutive increase is within 3 standard errors.
    pub monotone: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn uniform_gradient_decay(
    model: &ModelSpec,
    phi: &Observable,
    t_grid: &[f64],
    x_set: &[Field],
    directions: &[Field],
    n: usize,
    sc: &StreamConfig,
) -> Result<GradientDecay> {
    if x_set.is_empty() || directions.is_empty() {
        return Err(Error::domain("gradient decay needs states and directions"));
    }
    let unit: Vec<Field> = directions.iter().map(|h| h * (1.0 / h.sup_norm())).collect();
    let mut sup = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let mut best = MCEstimate::exact(0.0, 0);
        for x in x_set {
            for h in &unit {
                let g = gradient_tangent(model, phi, x, t, h, n, sc)?;
                if g.mean.abs() > best.mean {
                    best = MCEstimate { mean: g.mean.abs(), ..g };
                }
            }
        }
        sup.push(best);
    }
    let y: Vec<f64> = sup.iter().map(|s| s.mean.ln()).collect();
    let (_, b, r2) = linear_fit(t_grid, &y);
    let monotone = sup.windows(2).all(|w| w[1].mean <= w[0].mean + 3.0 * w[0].std_error.hypot(w[1].std_error));
    Ok(GradientDecay { t_grid: t_grid.to_vec(), sup, theta_hat: -b, r2, monotone })
}

/// Stationary variance of mode `k` for `du = (Δu - a u)dt + σ dw`.
pub fn ou_stationary_variance(k: usize, a: f64, sigma: f64) -> f64 {
    sigma * sigma / (2.0 * (crate::spectral::eigenvalue(k).abs() + a))
}
