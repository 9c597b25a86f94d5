//! Exponential-Euler integration of the mild equation together with the
//! first and second variation flows and the stochastic integral used by the
//! gradient formula. All components advance with the same increments.
//!
//! One step, with `W = Σ_{i≤M} e_i Δβ_i` sampled on the grid:
//!
//! ```text
//! u ← S (u + Δt F_n(u) + G(u) W)
//! η ← S (m η),                          m = 1 + Δt f_n′(u) + g′(u) W
//! ζ ← S (m ζ + (Δt f_n″(u) + g″(u) W) η_a η_b)
//! I ← I + ⟨G(u)⁻¹ η, W⟩_H
//! ```
//!
//! `S` is the heat propagator `e^{Δt A}` (or `e^{Δt A_k}`) held as a dense
//! symmetric matrix so that all columns advance in one matrix product.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::coefficients::ModelSpec;
use crate::error::{Error, Result};
use crate::noise::NoiseStream;
use crate::spectral::{eigenvalue, mollify, yosida_multiplier, Field, Grid};

/// Time discretization.
#[derive(Clone, Debug, PartialEq)]
pub struct SchemeConfig {
    pub dt: f64,
    pub horizon: f64,
    /// Requested snapshot times; each is snapped to the nearest step.
    pub snapshot_times: Vec<f64>,
    /// Abort when `|u|_E` exceeds this value.
    pub blowup_ceiling: f64,
}

impl SchemeConfig {
    pub fn new(dt: f64, horizon: f64) -> Result<Self> {
        let cfg = Self { dt, horizon, snapshot_times: vec![horizon], blowup_ceiling: 1e3 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_snapshots(mut self, times: Vec<f64>) -> Result<Self> {
        self.snapshot_times = times;
        self.validate()?;
        Ok(self)
    }

    pub fn with_ceiling(mut self, ceiling: f64) -> Self {
        self.blowup_ceiling = ceiling;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::domain(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::domain(format!("horizon must be >= 0, got {}", self.horizon)));
        }
        if let Some(t) = self.snapshot_times.iter().find(|&&t| !(t >= 0.0 && t <= self.horizon + 1e-12)) {
            return Err(Error::domain(format!("snapshot time {t} outside [0, {}]", self.horizon)));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        self.step_of(self.horizon)
    }

    /// Nearest step index of time `t`.
    pub fn step_of(&self, t: f64) -> usize {
        (t / self.dt).round() as usize
    }

    /// Sorted, de-duplicated snapshot step indices.
    pub fn snapshot_steps(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.snapshot_times.iter().map(|&t| self.step_of(t)).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Dense `e^{Δt A}` and grid samples of the noise modes.
#[derive(Debug)]
pub struct Propagator {
    n: usize,
    /// Row-major `N × N` heat propagator.
    s: Vec<f64>,
    /// Row-major `N × N`, entry `(j, k)` is `e_{k+1}(ξ_j)`.
    modes: Vec<f64>,
}

impl Propagator {
    fn build(grid: Grid, dt: f64, yosida: Option<f64>) -> Self {
        let n = grid.len();
        let h = grid.spacing();
        let mut modes = vec![0.0; n * n];
        for j in 0..n {
            let xi = grid.xi(j);
            for k in 0..n {
                modes[j * n + k] = std::f64::consts::SQRT_2 * (((k + 1) as f64) * std::f64::consts::PI * xi).sin();
            }
        }
        let mult: Vec<f64> = (1..=n)
            .map(|k| match yosida {
                Some(y) => (dt * yosida_multiplier(k, y)).exp(),
                None => (dt * eigenvalue(k)).exp(),
            })
            .collect();
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += mult[k] * modes[i * n + k] * modes[j * n + k];
                }
                s[i * n + j] = h * acc;
                s[j * n + i] = h * acc;
            }
        }
        Self { n, s, modes }
    }

    /// Cached propagator for `(grid, dt, yosida_k)`.
    pub fn get(grid: Grid, dt: f64, yosida: Option<f64>) -> Arc<Propagator> {
        type Key = (usize, u64, Option<u64>);
        static CACHE: OnceLock<Mutex<HashMap<Key, Arc<Propagator>>>> = OnceLock::new();
        let key = (grid.len(), dt.to_bits(), yosida.map(f64::to_bits));
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(p) = cache.lock().expect("propagator cache poisoned").get(&key) {
            return p.clone();
        }
        let p = Arc::new(Propagator::build(grid, dt, yosida));
        cache.lock().expect("propagator cache poisoned").entry(key).or_insert(p).clone()
    }

    /// `W_j = Σ_{i<dw.len()} e_{i+1}(ξ_j) dw_i`.
    pub fn noise_field(&self, dw: &[f64], out: &mut [f64]) {
        let n = self.n;
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.modes[j * n..j * n + dw.len()];
            *o = row.iter().zip(dw).map(|(a, b)| a * b).sum();
        }
    }

    /// `out = S · y` for a row-major `N × cols` block.
    fn apply(&self, y: &[f64], cols: usize, out: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(y.len(), n * cols);
        // SAFETY: slices have the stated shapes and strides and do not alias.
        unsafe {
            matrixmultiply::dgemm(
                n,
                n,
                cols,
                1.0,
                self.s.as_ptr(),
                n as isize,
                1,
                y.as_ptr(),
                cols as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                cols as isize,
                1,
            );
        }
    }
}

/// Which derived flows to carry along the primary path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowSpec {
    /// Initial directions `h` of the tangent flows.
    pub tangents: Vec<Field>,
    /// Index pairs `(a, b)` into `tangents` for second-order flows `ζ^{h_a,h_b}`.
    pub seconds: Vec<(usize, usize)>,
    /// Accumulate `∫⟨G(u)⁻¹η, dw⟩_H` for every tangent.
    pub bel: bool,
}

impl FlowSpec {
    pub fn primary() -> Self {
        Self::default()
    }

    pub fn tangents(hs: Vec<Field>) -> Self {
        Self { tangents: hs, ..Self::default() }
    }

    pub fn with_bel(mut self) -> Self {
        self.bel = true;
        self
    }
}

/// State of all flows at one step.
#[derive(Clone, Debug)]
pub struct FlowState {
    pub step: usize,
    pub t: f64,
    pub u: Field,
    pub eta: Vec<Field>,
    pub zeta: Vec<Field>,
    pub bel: Vec<f64>,
    /// Running `sup_s |u(s)|_E`.
    pub sup_u: f64,
}

/// Integrates all requested flows from `x`, calling `visit` at every snapshot
/// step (including step 0 when requested). Returns the final state.
pub fn simulate(
    model: &ModelSpec,
    x: &Field,
    spec: &FlowSpec,
    cfg: &SchemeConfig,
    stream: &NoiseStream,
    mut visit: impl FnMut(&FlowState),
) -> Result<FlowState> {
    cfg.validate()?;
    let grid = model.grid;
    x.same_grid(&grid.zeros())?;
    for h in &spec.tangents {
        h.same_grid(x)?;
    }
    if let Some(&(a, b)) = spec.seconds.iter().find(|(a, b)| *a >= spec.tangents.len() || *b >= spec.tangents.len()) {
        return Err(Error::domain(format!("second flow ({a},{b}) refers to a missing tangent")));
    }
    if spec.bel && !spec.tangents.is_empty() {
        model.require_bel_noise()?;
    }
    if (stream.dt - cfg.dt).abs() > 1e-12 * cfg.dt {
        return Err(Error::domain(format!("noise step {} differs from scheme step {}", stream.dt, cfg.dt)));
    }

    let n = grid.len();
    let nt = spec.tangents.len();
    let ns = spec.seconds.len();
    let cols = 1 + nt + ns;
    let prop = Propagator::get(grid, cfg.dt, model.yosida_k);
    let m_modes = model.noise_modes;
    let mut cursor = stream.with_modes(m_modes).cursor();
    let drift = model.drift().clone();
    let diff = model.diffusion.g.clone();
    let h_space = grid.spacing();
    let dt = cfg.dt;

    let mut state = FlowState {
        step: 0,
        t: 0.0,
        u: x.clone(),
        eta: spec.tangents.clone(),
        zeta: vec![grid.zeros(); ns],
        bel: vec![0.0; if spec.bel { nt } else { 0 }],
        sup_u: x.sup_norm(),
    };
    let snaps = cfg.snapshot_steps();
    let mut next_snap = 0;
    if snaps.first() == Some(&0) {
        visit(&state);
        next_snap = 1;
    }
    let n_steps = cfg.n_steps();
    let mut dw = vec![0.0; m_modes];
    let mut w = vec![0.0; n];
    let mut y = vec![0.0; n * cols];
    let mut out = vec![0.0; n * cols];
    let mut fd = vec![(0.0, 0.0, 0.0); n];
    let mut gd = vec![(0.0, 0.0, 0.0); n];

    for step in 0..n_steps {
        cursor.next_into(&mut dw);
        prop.noise_field(&dw, &mut w);
        let u = state.u.values();
        for j in 0..n {
            let xi = grid.xi(j);
            fd[j] = drift.derivs(xi, u[j]);
            gd[j] = diff.derivs(xi, u[j]);
        }
        if spec.bel {
            for (acc, eta) in state.bel.iter_mut().zip(&state.eta) {
                let e = eta.values();
                let mut s = 0.0;
                for j in 0..n {
                    s += e[j] / gd[j].0 * w[j];
                }
                *acc += h_space * s;
            }
        }
        for j in 0..n {
            let row = &mut y[j * cols..(j + 1) * cols];
            row[0] = u[j] + dt * fd[j].0 + gd[j].0 * w[j];
            let m = 1.0 + dt * fd[j].1 + gd[j].1 * w[j];
            for c in 0..nt {
                row[1 + c] = m * state.eta[c].values()[j];
            }
            if ns > 0 {
                let curv = dt * fd[j].2 + gd[j].2 * w[j];
                for (c, &(a, b)) in spec.seconds.iter().enumerate() {
                    row[1 + nt + c] =
                        m * state.zeta[c].values()[j] + curv * state.eta[a].values()[j] * state.eta[b].values()[j];
                }
            }
        }
        prop.apply(&y, cols, &mut out);
        let mut sup = 0.0f64;
        {
            let u = state.u.values_mut();
            for j in 0..n {
                u[j] = out[j * cols];
                sup = sup.max(u[j].abs());
            }
        }
        for c in 0..nt {
            let e = state.eta[c].values_mut();
            for j in 0..n {
                e[j] = out[j * cols + 1 + c];
            }
        }
        for c in 0..ns {
            let z = state.zeta[c].values_mut();
            for j in 0..n {
                z[j] = out[j * cols + 1 + nt + c];
            }
        }
        state.step = step + 1;
        state.t = state.step as f64 * dt;
        state.sup_u = state.sup_u.max(sup);
        if !(sup <= cfg.blowup_ceiling) {
            return Err(Error::BlowUp { time: state.t, norm: sup, ceiling: cfg.blowup_ceiling });
        }
        if next_snap < snaps.len() && snaps[next_snap] == state.step {
            visit(&state);
            next_snap += 1;
        }
    }
    Ok(state)
}

/// One trajectory with its snapshots.
#[derive(Clone, Debug)]
pub struct PathBundle {
    pub model: ModelSpec,
    pub cfg: SchemeConfig,
    pub stream: NoiseStream,
    pub x0: Field,
    pub times: Vec<f64>,
    pub u_path: Vec<Field>,
    /// Direction and snapshots of `η^h`.
    pub eta_path: Option<(Field, Vec<Field>)>,
    /// Directions and snapshots of `ζ^{h,k}`.
    pub zeta_path: Option<((Field, Field), Vec<Field>)>,
    /// `∫⟨G(u)⁻¹ η^h, dw⟩_H` up to the horizon, when `η^h` is present.
    pub bel_integral: Option<f64>,
    /// `sup_t |u(t)|_E`.
    pub sup_norm: f64,
}

fn record(
    model: &ModelSpec,
    x: &Field,
    spec: &FlowSpec,
    cfg: &SchemeConfig,
    stream: &NoiseStream,
) -> Result<(Vec<f64>, Vec<FlowState>, FlowState)> {
    let mut times = Vec::new();
    let mut states = Vec::new();
    let last = simulate(model, x, spec, cfg, stream, |s| {
        times.push(s.t);
        states.push(s.clone());
    })?;
    Ok((times, states, last))
}

/// Primary path from `x`.
pub fn evolve_primary(model: &ModelSpec, x: &Field, cfg: &SchemeConfig, stream: &NoiseStream) -> Result<PathBundle> {
    let (times, states, last) = record(model, x, &FlowSpec::primary(), cfg, stream)?;
    Ok(PathBundle {
        model: model.clone(),
        cfg: cfg.clone(),
        stream: *stream,
        x0: x.clone(),
        times,
        u_path: states.into_iter().map(|s| s.u).collect(),
        eta_path: None,
        zeta_path: None,
        bel_integral: None,
        sup_norm: last.sup_u,
    })
}

/// Adds `η^h` (and, when `|g| > 0`, its stochastic integral) by replaying the
/// bundle's noise.
pub fn evolve_tangent(bundle: &PathBundle, h: &Field) -> Result<PathBundle> {
    let bel = bundle.model.require_bel_noise().is_ok();
    let spec = FlowSpec { tangents: vec![h.clone()], seconds: vec![], bel };
    let (_, states, last) = record(&bundle.model, &bundle.x0, &spec, &bundle.cfg, &bundle.stream)?;
    let mut out = bundle.clone();
    out.eta_path = Some((h.clone(), states.into_iter().map(|mut s| s.eta.remove(0)).collect()));
    out.bel_integral = if bel { Some(last.bel[0]) } else { None };
    Ok(out)
}

/// Adds `ζ^{h,k}` by replaying the bundle's noise.
pub fn evolve_second(bundle: &PathBundle, h: &Field, k: &Field) -> Result<PathBundle> {
    let spec = FlowSpec { tangents: vec![h.clone(), k.clone()], seconds: vec![(0, 1)], bel: false };
    let (_, states, _) = record(&bundle.model, &bundle.x0, &spec, &bundle.cfg, &bundle.stream)?;
    let mut out = bundle.clone();
    out.zeta_path = Some(((h.clone(), k.clone()), states.into_iter().map(|mut s| s.zeta.remove(0)).collect()));
    Ok(out)
}

/// `Σ_j ⟨G(u_j)⁻¹ η_j, W_j⟩_H` for the bundle's tangent flow.
pub fn bel_accumulate(bundle: &PathBundle) -> Result<f64> {
    bundle.model.require_bel_noise()?;
    match (&bundle.eta_path, bundle.bel_integral) {
        (Some(_), Some(v)) => Ok(v),
        _ => Err(Error::domain("bundle carries no tangent flow")),
    }
}

/// Primary path started from the mollified datum `x_n`.
#[allow(non_snake_case)]
pub fn evolve_from_H(
    model: &ModelSpec,
    x_h: &Field,
    n: usize,
    cfg: &SchemeConfig,
    stream: &NoiseStream,
) -> Result<PathBundle> {
    evolve_primary(model, &mollify(x_h, n)?, cfg, stream)
}

/// `sup_t |u^{x_n}(t) - u^{x_{2n}}(t)|_H` over the snapshots, same noise.
pub fn mollified_distance(
    model: &ModelSpec,
    x_h: &Field,
    n: usize,
    cfg: &SchemeConfig,
    stream: &NoiseStream,
) -> Result<f64> {
    let a = evolve_from_H(model, x_h, n, cfg, stream)?;
    let b = evolve_from_H(model, x_h, 2 * n, cfg, stream)?;
    Ok(a.u_path.iter().zip(&b.u_path).map(|(p, q)| (p - q).l2_norm()).fold(0.0, f64::max))
}
