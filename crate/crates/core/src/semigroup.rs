//! Monte Carlo estimators of `P_tφ`, its gradient, the resolvent
//! `(λ - 𝒦)⁻¹ψ`, the carré-du-champ series, the Gaussian regularization
//! `R_t`, and the generator of mode-truncated systems.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::coefficients::ModelSpec;
use crate::error::{Error, Result};
use crate::flows::{simulate, FlowSpec, FlowState, SchemeConfig};
use crate::mc::{mean_se, par_map_counting, u_stat_square, MCEstimate};
use crate::noise::NoiseStream;
use crate::observable::Observable;
use crate::spectral::{eigenvalue, heat_semigroup, Field};

/// How trajectories are seeded and discretized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamConfig {
    pub master_seed: u64,
    pub dt: f64,
    /// Separates populations that would otherwise share trajectory ids.
    pub sub_id: u64,
    /// Trajectory `i` uses id `id_offset + i`.
    pub id_offset: u64,
    pub ceiling: f64,
    /// Largest tolerated fraction of blow-up aborts.
    pub max_abort_frac: f64,
}

impl StreamConfig {
    pub fn new(master_seed: u64, dt: f64) -> Self {
        Self { master_seed, dt, sub_id: 0, id_offset: 0, ceiling: 1e3, max_abort_frac: 0.01 }
    }

    pub fn with_sub(mut self, sub_id: u64) -> Self {
        self.sub_id = sub_id;
        self
    }

    pub fn with_offset(mut self, id_offset: u64) -> Self {
        self.id_offset = id_offset;
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn stream(&self, modes: usize, i: u64) -> Result<NoiseStream> {
        Ok(NoiseStream::new(self.master_seed, self.id_offset + i, modes, self.dt)?.with_sub(self.sub_id))
    }

    pub fn scheme(&self, horizon: f64, snapshots: Vec<f64>) -> Result<SchemeConfig> {
        Ok(SchemeConfig::new(self.dt, horizon)?.with_snapshots(snapshots)?.with_ceiling(self.ceiling))
    }
}

/// Runs `n` trajectories from `x` and maps every snapshot to a value with
/// `per_snapshot`; returns `samples[traj][snapshot]`.
pub fn path_samples(
    model: &ModelSpec,
    x: &Field,
    spec: &FlowSpec,
    times: &[f64],
    n: usize,
    sc: &StreamConfig,
    per_snapshot: impl Fn(&FlowState) -> f64 + Sync + Send,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let horizon = times.iter().cloned().fold(0.0, f64::max);
    let cfg = sc.scheme(horizon, times.to_vec())?;
    let steps = cfg.snapshot_steps();
    let idx: Vec<usize> = times.iter().map(|&t| steps.binary_search(&cfg.step_of(t)).unwrap()).collect();
    par_map_counting(n, sc.max_abort_frac, |i| {
        let stream = sc.stream(model.noise_modes, i)?;
        let mut vals = Vec::with_capacity(steps.len());
        simulate(model, x, spec, &cfg, &stream, |s| vals.push(per_snapshot(s)))?;
        Ok(idx.iter().map(|&k| vals[k]).collect())
    })
}

fn column(samples: &[Vec<f64>], j: usize) -> Vec<f64> {
    samples.iter().map(|r| r[j]).collect()
}

fn estimate(xs: &[f64], aborted: usize) -> MCEstimate {
    let mut e = MCEstimate::from_samples(xs);
    e.aborted = aborted;
    e
}

/// `P_tφ(x) = E φ(u^x(t))`.
pub fn estimate_pt(
    model: &ModelSpec,
    phi: &Observable,
    x: &Field,
    t: f64,
    n: usize,
    sc: &StreamConfig,
) -> Result<MCEstimate> {
    Ok(estimate_pt_times(model, phi, x, &[t], n, sc)?.remove(0))
}

/// `P_tφ(x)` at several times on one trajectory population.
pub fn estimate_pt_times(
    model: &ModelSpec,
    phi: &Observable,
    x: &Field,
    times: &[f64],
    n: usize,
    sc: &StreamConfig,
) -> Result<Vec<MCEstimate>> {
    if let Some(t) = times.iter().find(|&&t| !(t >= 0.0)) {
        return Err(Error::domain(format!("P_t needs t >= 0, got {t}")));
    }
    if times.iter().all(|&t| t == 0.0) {
        return Ok(times.iter().map(|_| MCEstimate::exact(phi.eval(x), n)).collect());
    }
    let (s, ab) = path_samples(model, x, &FlowSpec::primary(), times, n, sc, |st| phi.eval(&st.u))?;
    Ok((0..times.len()).map(|j| estimate(&column(&s, j), ab)).collect())
}

/// `⟨h, D P_tφ(x)⟩_E` by the Bismut–Elworthy–Li weight
/// `(φ(u(t)) - φ(x)) · (1/t) ∫⟨G(u)⁻¹η^h, dw⟩_H`. Subtracting `φ(x)` leaves the
/// mean unchanged because the stochastic integral has mean zero.
pub fn gradient_bel(
    model: &ModelSpec,
    phi: &Observable,
    x: &Field,
    t: f64,
    h: &Field,
    n: usize,
    sc: &StreamConfig,
) -> Result<MCEstimate> {
    model.require_bel_noise()?;
    if !(t > 0.0) {
        return Err(Error::domain(format!("gradient formula needs t > 0, got {t}")));
    }
    let phi0 = phi.eval(x);
    let spec = FlowSpec::tangents(vec![h.clone()]).with_bel();
    let (s, ab) = path_samples(model, x, &spec, &[t], n, sc, |st| (phi.eval(&st.u) - phi0) * st.bel[0] / st.t)?;
    Ok(estimate(&column(&s, 0), ab))
}

/// `⟨h, D P_tφ(x)⟩_E = E⟨η^h(t), Dφ(u(t))⟩_E`.
pub fn gradient_tangent(
    model: &ModelSpec,
    phi: &Observable,
    x: &Field,
    t: f64,
    h: &Field,
    n: usize,
    sc: &StreamConfig,
) -> Result<MCEstimate> {
    if !phi.has_gradient() {
        return Err(Error::MissingDerivative("gradient"));
    }
    if !(t >= 0.0) {
        return Err(Error::domain(format!("t must be >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(MCEstimate::exact(phi.directional(x, h)?, n));
    }
    let spec = FlowSpec::tangents(vec![h.clone()]);
    let (s, ab) =
        path_samples(model, x, &spec, &[t], n, sc, |st| phi.directional(&st.u, &st.eta[0]).unwrap_or(f64::NAN))?;
    Ok(estimate(&column(&s, 0), ab))
}

/// Central difference `(P_tφ(x+εh) - P_tφ(x-εh)) / 2ε` with common noise.
pub fn gradient_fd(
    model: &ModelSpec,
    phi: &Observable,
    x: &Field,
    t: f64,
    h: &Field,
    eps: f64,
    n: usize,
    sc: &StreamConfig,
) -> Result<MCEstimate> {
    let c = compare_gradients(model, phi, x, t, h, eps, n, sc)?;
    Ok(c.fd)
}

/// BEL, tangent and finite-difference gradients on one noise population.
#[derive(Clone, Debug)]
pub struct GradientComparison {
    pub bel: MCEstimate,
    pub tangent: MCEstimate,
    pub fd: MCEstimate,
    /// Finite difference at step `2ε`, for a bias budget.
    pub fd_coarse: MCEstimate,
    /// Paired differences.
    pub bel_minus_tangent: MCEstimate,
    pub fd_minus_tangent: MCEstimate,
    pub fd_minus_bel: MCEstimate,
    /// `|FD_ε - FD_2ε|`, an estimate of the O(ε²) bias scaled by 4/3.
    pub fd_bias_budget: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn compare_gradients(
    model: &ModelSpec,
    phi: &Observable,
    x: &Field,
    t: f64,
    h: &Field,
    eps: f64,
    n: usize,
    sc: &StreamConfig,
) -> Result<GradientComparison> {
    model.require_bel_noise()?;
    if !(t > 0.0) || !(eps > 0.0) {
        return Err(Error::domain("gradient comparison needs t > 0 and eps > 0"));
    }
    let cfg = sc.scheme(t, vec![t])?;
    let phi0 = phi.eval(x);
    let shifted = |a: f64| x + &(h * a);
    let starts = [shifted(eps), shifted(-eps), shifted(2.0 * eps), shifted(-2.0 * eps)];
    let (rows, ab) = par_map_counting(n, sc.max_abort_frac, |i| {
        let stream = sc.stream(model.noise_modes, i)?;
        let spec = FlowSpec::tangents(vec![h.clone()]).with_bel();
        let s = simulate(model, x, &spec, &cfg, &stream, |_| {})?;
        let bel = (phi.eval(&s.u) - phi0) * s.bel[0] / t;
        let tan = phi.directional(&s.u, &s.eta[0])?;
        let mut ends = [0.0; 4];
        for (e, x0) in ends.iter_mut().zip(&starts) {
            *e = phi.eval(&simulate(model, x0, &FlowSpec::primary(), &cfg, &stream, |_| {})?.u);
        }
        let fd = (ends[0] - ends[1]) / (2.0 * eps);
        let fd2 = (ends[2] - ends[3]) / (4.0 * eps);
        Ok([bel, tan, fd, fd2])
    })?;
    let col = |j: usize| -> Vec<f64> { rows.iter().map(|r| r[j]).collect() };
    let diff = |a: usize, b: usize| -> Vec<f64> { rows.iter().map(|r| r[a] - r[b]).collect() };
    let fd = estimate(&col(2), ab);
    let fd_coarse = estimate(&col(3), ab);
    let fd_bias_budget = (fd.mean - fd_coarse.mean).abs();
    Ok(GradientComparison {
        bel: estimate(&col(0), ab),
        tangent: estimate(&col(1), ab),
        fd,
        fd_coarse,
        bel_minus_tangent: estimate(&diff(0, 1), ab),
        fd_minus_tangent: estimate(&diff(2, 1), ab),
        fd_minus_bel: estimate(&diff(2, 0), ab),
        fd_bias_budget,
    })
}

/// Laplace-transform quadrature settings.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureConfig {
    /// Number of geometrically spaced positive nodes.
    pub n_nodes: usize,
    /// Smallest positive node.
    pub t_min: f64,
    /// Target for `e^{-λ T_max} sup|ψ| / λ`.
    pub tail_tol: f64,
    /// Explicit horizon; required when `ψ` is unbounded.
    pub t_max: Option<f64>,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { n_nodes: 24, t_min: 0.01, tail_tol: 1e-3, t_max: None }
    }
}

/// Nodes on the step lattice with weights integrating `e^{-λt}` against the
/// piecewise-linear interpolant of the integrand on `[0, T_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub t_max: f64,
    pub lambda: f64,
}

impl Quadrature {
    pub fn build(lambda: f64, sup_psi: Option<f64>, cfg: &QuadratureConfig, dt: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::domain(format!("resolvent needs lambda > 0, got {lambda}")));
        }
        let t_max = match (cfg.t_max, sup_psi) {
            (Some(t), _) => t,
            (None, Some(s)) if s > 0.0 => ((s / (lambda * cfg.tail_tol)).ln() / lambda).max(cfg.t_min),
            (None, Some(_)) => cfg.t_min,
            (None, None) => return Err(Error::domain("unbounded integrand needs an explicit quadrature horizon")),
        };
        let t_max = (t_max / dt).ceil() * dt;
        let t_min = cfg.t_min.max(dt).min(t_max);
        let mut nodes = vec![0.0];
        let k = cfg.n_nodes.max(2);
        let ratio = (t_max / t_min).powf(1.0 / (k - 1) as f64);
        for i in 0..k {
            let t = ((t_min * ratio.powi(i as i32)) / dt).round() * dt;
            if t > *nodes.last().unwrap() + 0.5 * dt {
                nodes.push(t.min(t_max));
            }
        }
        if *nodes.last().unwrap() < t_max - 0.5 * dt {
            nodes.push(t_max);
        }
        let mut weights = vec![0.0; nodes.len()];
        for w in nodes.windows(2).enumerate() {
            let (i, pair) = w;
            let (wa, wb) = segment_weights(lambda, pair[0], pair[1]);
            weights[i] += wa;
            weights[i + 1] += wb;
        }
        Ok(Self { nodes, weights, t_max, lambda })
    }

    /// Bound on the neglected tail `∫_{T_max}^∞ e^{-λt} P_tψ dt`.
    pub fn tail_bound(&self, sup_psi: Option<f64>) -> f64 {
        match sup_psi {
            Some(s) => (-self.lambda * self.t_max).exp() * s / self.lambda,
            None => f64::INFINITY,
        }
    }

    /// `Σ w_j v_j`.
    pub fn apply(&self, v: &[f64]) -> f64 {
        self.weights.iter().zip(v).map(|(w, x)| w * x).sum()
    }
}

/// Exact `∫_a^b e^{-λt} ℓ_a(t) dt` and `∫_a^b e^{-λt} ℓ_b(t) dt` for the two
/// linear hat pieces on `[a, b]`.
fn segment_weights(lambda: f64, a: f64, b: f64) -> (f64, f64) {
    let d = b - a;
    let x = lambda * d;
    let ea = (-lambda * a).exp();
    // (1 - e^{-x})/x and (1 - (1+x)e^{-x})/x², with series near 0.
    let (p0, p1) = if x < 1e-4 {
        (1.0 - x / 2.0 + x * x / 6.0, 0.5 - x / 3.0 + x * x / 8.0)
    } else {
        let em = (-x).exp();
        ((1.0 - em) / x, (1.0 - (1.0 + x) * em) / (x * x))
    };
    let total = ea * d * p0;
    let wb = ea * d * p1;
    (total - wb, wb)
}

/// Resolvent value with its quadrature.
#[derive(Clone, Debug)]
pub struct ResolventEstimate {
    pub value: MCEstimate,
    pub lambda: f64,
    pub quadrature: Quadrature,
    pub truncation_error_bound: f64,
}

/// `(λ - 𝒦)⁻¹ψ(x) = ∫₀^∞ e^{-λt} P_tψ(x) dt`, one trajectory population for
/// all nodes.
pub fn resolvent(
    model: &ModelSpec,
    psi: &Observable,
    x: &Field,
    lambda: f64,
    qc: &QuadratureConfig,
    n: usize,
    sc: &StreamConfig,
) -> Result<ResolventEstimate> {
    let q = Quadrature::build(lambda, psi.sup(), qc, sc.dt)?;
    let (s, ab) = path_samples(model, x, &FlowSpec::primary(), &q.nodes, n, sc, |st| psi.eval(&st.u))?;
    let per_path: Vec<f64> = s.iter().map(|r| q.apply(r)).collect();
    let bound = q.tail_bound(psi.sup());
    Ok(ResolventEstimate { value: estimate(&per_path, ab), lambda, quadrature: q, truncation_error_bound: bound })
}

/// Per-trajectory resolvent values `Σ_j w_j ψ(u(t_j))`; used where the same
/// paths feed several estimators.
pub fn resolvent_samples(
    model: &ModelSpec,
    psi: &Observable,
    x: &Field,
    q: &Quadrature,
    n: usize,
    sc: &StreamConfig,
) -> Result<Vec<f64>> {
    let (s, _) = path_samples(model, x, &FlowSpec::primary(), &q.nodes, n, sc, |st| psi.eval(&st.u))?;
    Ok(s.iter().map(|r| q.apply(r)).collect())
}

/// Per-trajectory values of `φ̂ = Σ_j w_j ψ(u_j)` and of
/// `⟨h_i, Dφ̂⟩ = Σ_j w_j ⟨η^{h_i}_j, Dψ(u_j)⟩_E` for each direction.
/// Returns rows `[φ̂, d_1, …, d_k]`.
pub fn resolvent_with_tangents(
    model: &ModelSpec,
    psi: &Observable,
    x: &Field,
    q: &Quadrature,
    dirs: &[Field],
    n: usize,
    sc: &StreamConfig,
) -> Result<Vec<Vec<f64>>> {
    if !psi.has_gradient() {
        return Err(Error::MissingDerivative("gradient"));
    }
    let cfg = sc.scheme(*q.nodes.last().unwrap(), q.nodes.clone())?;
    let steps = cfg.snapshot_steps();
    let w: Vec<f64> = {
        // Merge weights of nodes that snapped to the same step.
        let mut w = vec![0.0; steps.len()];
        for (t, wt) in q.nodes.iter().zip(&q.weights) {
            let k = steps.binary_search(&cfg.step_of(*t)).unwrap();
            w[k] += wt;
        }
        w
    };
    let spec = FlowSpec::tangents(dirs.to_vec());
    let k = dirs.len();
    let (rows, _) = par_map_counting(n, sc.max_abort_frac, |i| {
        let stream = sc.stream(model.noise_modes, i)?;
        let mut acc = vec![0.0; k + 1];
        let mut j = 0;
        let mut err = None;
        simulate(model, x, &spec, &cfg, &stream, |s| {
            acc[0] += w[j] * psi.eval(&s.u);
            match psi.gradient(&s.u) {
                Ok(g) => {
                    for (a, e) in acc[1..].iter_mut().zip(&s.eta) {
                        *a += w[j] * g.pair(e);
                    }
                }
                Err(e) => err = Some(e),
            }
            j += 1;
        })?;
        match err {
            Some(e) => Err(e),
            None => Ok(acc),
        }
    })?;
    Ok(rows)
}

/// Partial sums of the carré-du-champ series with a tail diagnostic.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaSeries {
    pub partial_sum: f64,
    /// `|⟨G(x)e_i, Dφ(x)⟩_E|²`, `i = 1..M`.
    pub terms: Vec<f64>,
    /// Share of the partial sum carried by the last quarter of the terms.
    pub tail_ratio: f64,
    /// Whether the tail is small enough to call the series Cauchy.
    pub cauchy: bool,
}

/// Threshold on [`GammaSeries::tail_ratio`] below which the series is Cauchy.
pub const GAMMA_TAIL_THRESHOLD: f64 = 0.02;

impl GammaSeries {
    pub fn from_terms(terms: Vec<f64>) -> Self {
        let partial_sum: f64 = terms.iter().sum();
        let q = (terms.len() / 4).max(1);
        let tail: f64 = terms[terms.len() - q..].iter().sum();
        let tail_ratio = if partial_sum == 0.0 { 0.0 } else { tail / partial_sum };
        Self { partial_sum, terms, tail_ratio, cauchy: tail_ratio < GAMMA_TAIL_THRESHOLD }
    }
}

/// `Σ_{i ≤ M} |⟨G(x)e_i, Dφ(x)⟩_E|²`, where `provider(y)` returns
/// `⟨y, Dφ(x)⟩_E`.
pub fn gamma_operator(
    model: &ModelSpec,
    provider: impl Fn(&Field) -> Result<f64>,
    x: &Field,
    m_series: usize,
) -> Result<GammaSeries> {
    let g = model.grid;
    if m_series == 0 || m_series > g.len() {
        return Err(Error::ModeIndex { index: m_series, max: g.len() });
    }
    let gx = model.diffusion_field(x)?;
    let mut terms = Vec::with_capacity(m_series);
    for i in 1..=m_series {
        let d = provider(&gx.hadamard(&g.mode(i)?))?;
        terms.push(d * d);
    }
    Ok(GammaSeries::from_terms(terms))
}

/// Closed form `χ′(⟨x,w⟩)² |g(x)w|²_H` of the full series for cylindrical `φ`.
pub fn gamma_cylindrical_closed_form(model: &ModelSpec, phi: &Observable, x: &Field) -> Result<f64> {
    match phi {
        Observable::Cylindrical { chi, w } => {
            let d = chi.derivs(x.inner(w)).1;
            let gw = model.diffusion_field(x)?.hadamard(w);
            Ok(d * d * gw.inner(&gw))
        }
        _ => Err(Error::domain("closed-form series needs a cylindrical observable")),
    }
}

/// Unbiased estimate of `Γ(φ)(x)` for `φ = (λ-𝒦)⁻¹ψ` from the rows of
/// [`resolvent_with_tangents`] taken along `G(x)e_i`: a U-statistic per term.
pub fn gamma_from_rows(rows: &[Vec<f64>]) -> GammaSeries {
    let k = rows[0].len() - 1;
    let terms = (1..=k).map(|i| u_stat_square(&rows.iter().map(|r| r[i]).collect::<Vec<_>>())).collect();
    GammaSeries::from_terms(terms)
}

/// Mode variances `q_k = (1 - e^{-2k²π²t}) / (2k²π²)` of the Gaussian
/// stochastic convolution at time `t`.
pub fn ou_variance(k: usize, t: f64) -> f64 {
    let a = -eigenvalue(k);
    -(-2.0 * a * t).exp_m1() / (2.0 * a)
}

/// `R_tψ(x) = E ψ(e^{tA}x + y)` with `y` the `M`-mode Gaussian of covariance
/// `Q_t`.
pub fn ou_regularize(
    model: &ModelSpec,
    psi: &Observable,
    t: f64,
    x: &Field,
    n_mc: usize,
    seed: u64,
) -> Result<MCEstimate> {
    if !(t > 0.0) {
        return Err(Error::domain(format!("regularization needs t > 0, got {t}")));
    }
    let g = model.grid;
    let base = heat_semigroup(x, t)?;
    let m = model.noise_modes;
    let sd: Vec<f64> = (1..=m).map(|k| ou_variance(k, t).sqrt()).collect();
    let modes: Vec<Field> = (1..=m).map(|k| g.mode(k)).collect::<Result<_>>()?;
    let vals = crate::mc::par_map(n_mc, |i| {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&i.to_le_bytes());
        key[16..24].copy_from_slice(b"ou-regul");
        let mut rng = ChaCha8Rng::from_seed(key);
        let mut y = base.clone();
        for (s, e) in sd.iter().zip(&modes) {
            let z: f64 = StandardNormal.sample(&mut rng);
            y.axpy(s * z, e);
        }
        psi.eval(&y)
    });
    Ok(MCEstimate::from_samples(&vals))
}

/// Galerkin system on the first `K` modes: coordinates `X ∈ ℝ^K`,
/// `b(X) = P_K(A u + F_n(u))`, `σ_i(X) = P_K G(u) e_i`, `u = Σ X_k e_k`.
#[derive(Clone, Debug)]
pub struct FiniteModel {
    pub model: ModelSpec,
    pub k: usize,
    modes: Vec<Field>,
}

impl FiniteModel {
    /// Needs globally Lipschitz coefficients: a truncated or affine reaction.
    pub fn new(model: ModelSpec, k: usize) -> Result<Self> {
        if model.truncation_n.is_none() && model.reaction.deg_m > 1.0 {
            return Err(Error::HypothesisViolation(
                "finite-dimensional Ito formula needs a truncated (Lipschitz) reaction".into(),
            ));
        }
        let g = model.grid;
        let modes = (1..=k).map(|i| g.mode(i)).collect::<Result<_>>()?;
        Ok(Self { model, k, modes })
    }

    pub fn embed(&self, coords: &[f64]) -> Field {
        let mut u = self.model.grid.zeros();
        for (c, e) in coords.iter().zip(&self.modes) {
            u.axpy(*c, e);
        }
        u
    }

    pub fn project(&self, u: &Field) -> Vec<f64> {
        self.modes.iter().map(|e| u.inner(e)).collect()
    }

    /// `P_K(A u + F_n(u))` as a field.
    pub fn drift(&self, u: &Field) -> Result<Field> {
        let f = self.model.apply_F(u)?;
        let mut b = self.model.grid.zeros();
        for (k, e) in self.modes.iter().enumerate() {
            let coef = eigenvalue(k + 1) * u.inner(e) + f.inner(e);
            b.axpy(coef, e);
        }
        Ok(b)
    }

    /// `σ_i = P_K G(u) e_i`, `i = 1..K`.
    pub fn diffusions(&self, u: &Field) -> Result<Vec<Field>> {
        let g = self.model.diffusion_field(u)?;
        Ok(self
            .modes
            .iter()
            .map(|ei| {
                let ge = g.hadamard(ei);
                self.embed(&self.project(&ge))
            })
            .collect())
    }

    /// Euler–Maruyama path in coordinates; `visit(step, u)` sees every step
    /// before it is taken and the final state.
    pub fn simulate(
        &self,
        x: &Field,
        t: f64,
        stream: &NoiseStream,
        mut visit: impl FnMut(usize, &Field) -> Result<()>,
    ) -> Result<Field> {
        let dt = stream.dt;
        let n_steps = (t / dt).round() as usize;
        let mut cursor = stream.with_modes(self.k).cursor();
        let mut u = self.embed(&self.project(x));
        let mut dw = vec![0.0; self.k];
        for step in 0..n_steps {
            visit(step, &u)?;
            cursor.next_into(&mut dw);
            let b = self.drift(&u)?;
            let sig = self.diffusions(&u)?;
            let mut next = u.clone();
            next.axpy(dt, &b);
            for (s, d) in sig.iter().zip(&dw) {
                next.axpy(*d, s);
            }
            u = next;
        }
        visit(n_steps, &u)?;
        Ok(u)
    }
}

/// `ℒφ(x) = ½ Σ_i D²φ(x)(σ_i, σ_i) + ⟨b(x), Dφ(x)⟩_E` on the Galerkin system.
pub fn finite_generator_apply(fm: &FiniteModel, phi: &Observable, x: &Field) -> Result<f64> {
    let u = fm.embed(&fm.project(x));
    let b = fm.drift(&u)?;
    let mut acc = phi.directional(&u, &b)?;
    for s in fm.diffusions(&u)? {
        acc += 0.5 * phi.second(&u, &s, &s)?;
    }
    Ok(acc)
}

/// `Σ_i |⟨σ_i(x), Dφ(x)⟩_E|²` on the Galerkin system.
pub fn finite_carre(fm: &FiniteModel, phi: &Observable, x: &Field) -> Result<f64> {
    let u = fm.embed(&fm.project(x));
    let mut acc = 0.0;
    for s in fm.diffusions(&u)? {
        acc += phi.directional(&u, &s)?.powi(2);
    }
    Ok(acc)
}

/// Mean and standard error of a set of sample rows' column.
pub fn column_estimate(rows: &[Vec<f64>], j: usize) -> MCEstimate {
    let c = column(rows, j);
    let (m, se) = mean_se(&c);
    MCEstimate { mean: m, std_error: se, n_samples: c.len(), aborted: 0, samples: None }
}

/// BEL gradient sizes over a time grid and their log–log slope.
#[derive(Clone, Debug)]
pub struct GradientExponent {
    pub t_grid: Vec<f64>,
    /// `[time][direction]` BEL estimates of `⟨h, D P_tφ(x)⟩_E`.
    pub gradients: Vec<Vec<MCEstimate>>,
    /// `max_h |mean|` per time.
    pub sup: Vec<f64>,
    pub slope: f64,
    /// Delta-method standard error, ignoring correlation across times.
    pub slope_se: f64,
    pub r2: f64,
}

/// Fits `log sup_h |⟨h, D P_tφ(x)⟩_E|` against `log t` with one trajectory
/// population carrying a tangent and BEL weight per direction.
pub fn gradient_exponent(
    model: &ModelSpec,
    phi: &Observable,
    x: &Field,
    directions: &[Field],
    t_grid: &[f64],
    n: usize,
    sc: &StreamConfig,
) -> Result<GradientExponent> {
    model.require_bel_noise()?;
    if t_grid.len() < 2 || t_grid.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::domain("gradient exponent needs at least two times, all > 0"));
    }
    let phi0 = phi.eval(x);
    let spec = FlowSpec::tangents(directions.to_vec()).with_bel();
    let nd = directions.len();
    let (s, ab) = path_samples_multi(model, x, &spec, t_grid, n, sc, nd, |st, out| {
        let d = phi.eval(&st.u) - phi0;
        for (o, b) in out.iter_mut().zip(&st.bel) {
            *o = d * b / st.t;
        }
    })?;
    let gradients: Vec<Vec<MCEstimate>> =
        (0..t_grid.len()).map(|j| (0..nd).map(|k| estimate(&column(&s, j * nd + k), ab)).collect()).collect();
    let mut sup = Vec::new();
    let mut rel_var = Vec::new();
    for g in &gradients {
        let best = g.iter().max_by(|a, b| a.mean.abs().total_cmp(&b.mean.abs())).unwrap();
        sup.push(best.mean.abs());
        rel_var.push((best.std_error / best.mean.abs()).powi(2));
    }
    let lx: Vec<f64> = t_grid.iter().map(|t| t.ln()).collect();
    let ly: Vec<f64> = sup.iter().map(|v| v.ln()).collect();
    let (_, slope, r2) = crate::mc::linear_fit(&lx, &ly);
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let sxx: f64 = lx.iter().map(|v| (v - mx).powi(2)).sum();
    let slope_se = lx.iter().zip(&rel_var).map(|(v, r)| ((v - mx) / sxx).powi(2) * r).sum::<f64>().sqrt();
    Ok(GradientExponent { t_grid: t_grid.to_vec(), gradients, sup, slope, slope_se, r2 })
}

/// Like [`path_samples`] with `width` values per snapshot, flattened as
/// `samples[traj][snapshot * width + k]`.
#[allow(clippy::too_many_arguments)]
pub fn path_samples_multi(
    model: &ModelSpec,
    x: &Field,
    spec: &FlowSpec,
    times: &[f64],
    n: usize,
    sc: &StreamConfig,
    width: usize,
    per_snapshot: impl Fn(&FlowState, &mut [f64]) + Sync + Send,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let horizon = times.iter().cloned().fold(0.0, f64::max);
    let cfg = sc.scheme(horizon, times.to_vec())?;
    let steps = cfg.snapshot_steps();
    let idx: Vec<usize> = times.iter().map(|&t| steps.binary_search(&cfg.step_of(t)).unwrap()).collect();
    par_map_counting(n, sc.max_abort_frac, |i| {
        let stream = sc.stream(model.noise_modes, i)?;
        let mut vals = vec![0.0; steps.len() * width];
        let mut k = 0;
        simulate(model, x, spec, &cfg, &stream, |s| {
            per_snapshot(s, &mut vals[k * width..(k + 1) * width]);
            k += 1;
        })?;
        Ok(idx.iter().flat_map(|&j| vals[j * width..(j + 1) * width].to_vec()).collect())
    })
}

/// `q_1` as `t → ∞`.
pub fn ou_variance_limit(k: usize) -> f64 {
    1.0 / (2.0 * (k as f64 * PI).powi(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{cubic_default, ou_linear};
    use crate::observable::ScalarFn;
    use crate::spectral::Grid;

    #[test]
    fn quadrature_integrates_exponential() {
        for lambda in [0.5, 1.0, 2.0] {
            let q = Quadrature::build(lambda, Some(1.0), &QuadratureConfig::default(), 0.01).unwrap();
            let ones = vec![1.0; q.nodes.len()];
            let exact = -(-lambda * q.t_max).exp_m1() / lambda;
            assert!((q.apply(&ones) - exact).abs() < 1e-12);
            assert!((q.apply(&ones) - 1.0 / lambda).abs() <= 1e-3 + 1e-12);
            assert!(q.tail_bound(Some(1.0)) <= 1e-3 + 1e-12);
            assert!(q.nodes.iter().all(|t| ((t / 0.01).round() * 0.01 - t).abs() < 1e-12));
        }
        assert!(Quadrature::build(0.0, Some(1.0), &QuadratureConfig::default(), 0.01).is_err());
        assert!(Quadrature::build(1.0, None, &QuadratureConfig::default(), 0.01).is_err());
    }

    #[test]
    fn quadrature_linear_integrand() {
        // Piecewise-linear interpolation is exact for a linear integrand.
        let lambda = 1.5;
        let cfg = QuadratureConfig { t_max: Some(4.0), ..Default::default() };
        let q = Quadrature::build(lambda, None, &cfg, 0.01).unwrap();
        let v: Vec<f64> = q.nodes.iter().map(|t| 2.0 + 3.0 * t).collect();
        let tm = q.t_max;
        let e = (-lambda * tm).exp();
        let exact = 2.0 * (1.0 - e) / lambda + 3.0 * (1.0 - e * (1.0 + lambda * tm)) / (lambda * lambda);
        assert!((q.apply(&v) - exact).abs() < 1e-12);
    }

    #[test]
    fn segment_weights_small_interval() {
        let (a, b) = segment_weights(1.0, 0.0, 1e-7);
        assert!((a - 0.5e-7).abs() < 1e-14 && (b - 0.5e-7).abs() < 1e-14);
    }

    #[test]
    fn ou_variance_limit_value() {
        assert!((ou_variance(1, 50.0) - 1.0 / (2.0 * PI * PI)).abs() < 1e-15);
        assert_eq!(ou_variance_limit(1), 1.0 / (2.0 * PI * PI));
    }

    #[test]
    fn pt_at_zero_is_exact() {
        let g = Grid::new(16).unwrap();
        let m = cubic_default(g, 4).unwrap();
        let x = g.mode(1).unwrap();
        let phi = Observable::cylindrical(ScalarFn::Tanh, g.mode(1).unwrap());
        let e = estimate_pt(&m, &phi, &x, 0.0, 10, &StreamConfig::new(1, 0.01)).unwrap();
        assert_eq!(e.mean, phi.eval(&x));
        assert_eq!(e.std_error, 0.0);
        let gt = gradient_tangent(&m, &phi, &x, 0.0, &x, 10, &StreamConfig::new(1, 0.01)).unwrap();
        assert_eq!(gt.mean, phi.directional(&x, &x).unwrap());
        assert!(gradient_bel(&m, &phi, &x, 0.0, &x, 10, &StreamConfig::new(1, 0.01)).is_err());
    }

    #[test]
    fn generator_on_one_mode_ou() {
        let g = Grid::new(16).unwrap();
        let sigma = 0.8;
        let m = ou_linear(g, 1, 0.0, sigma).unwrap();
        let fm = FiniteModel::new(m, 1).unwrap();
        let e1 = g.mode(1).unwrap();
        let phi = Observable::cylindrical(ScalarFn::Square, e1.clone());
        let x = &e1 * 0.7;
        let l = finite_generator_apply(&fm, &phi, &x).unwrap();
        let expected = sigma * sigma - 2.0 * PI * PI * 0.49;
        assert!((l - expected).abs() < 1e-10, "{l} vs {expected}");
        let c = Observable::constant(2.0, e1);
        assert_eq!(finite_generator_apply(&fm, &c, &x).unwrap(), 0.0);
    }

    #[test]
    fn finite_model_needs_lipschitz() {
        let g = Grid::new(8).unwrap();
        let m = cubic_default(g, 2).unwrap();
        assert!(FiniteModel::new(m.clone(), 2).is_err());
        assert!(FiniteModel::new(m.with_truncation(Some(4.0)).unwrap(), 2).is_ok());
    }

    #[test]
    fn parseval_closed_form() {
        let g = Grid::new(32).unwrap();
        let m = cubic_default(g, 8).unwrap();
        let x = &g.mode(1).unwrap() * 1.3;
        let w = g.field(|s| (s * (1.0 - s)).sqrt());
        let phi = Observable::cylindrical(ScalarFn::Tanh, w);
        let series = gamma_operator(&m, |y| phi.directional(&x, y), &x, 32).unwrap();
        let closed = gamma_cylindrical_closed_form(&m, &phi, &x).unwrap();
        assert!((series.partial_sum - closed).abs() < 1e-8);
    }
}
