//! Reaction and diffusion coefficients, their Nemytskii operators, the
//! truncation `f_n(ρ) = f(nγ(ρ/n))`, and sampling-based hypothesis checks.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::spectral::{subdifferential, Field, Grid};

/// A scalar coefficient `c(ξ, ρ)` with its first two `ρ`-derivatives.
///
/// Implementations must be safe to call concurrently.
pub trait Coefficient: Send + Sync + fmt::Debug {
    /// `(c, ∂_ρ c, ∂²_ρ c)` at `(ξ, ρ)`.
    fn derivs(&self, xi: f64, rho: f64) -> (f64, f64, f64);

    fn value(&self, xi: f64, rho: f64) -> f64 {
        self.derivs(xi, rho).0
    }
}

/// `Σ_i c_i ρ^i`, constant in `ξ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    pub coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn constant(c: f64) -> Self {
        Self { coeffs: vec![c] }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.iter().rposition(|&c| c != 0.0).unwrap_or(0)
    }
}

impl Coefficient for Polynomial {
    fn derivs(&self, _xi: f64, rho: f64) -> (f64, f64, f64) {
        // Horner for the value and both derivatives in one pass.
        let (mut p, mut dp, mut ddp) = (0.0, 0.0, 0.0);
        for &c in self.coeffs.iter().rev() {
            ddp = ddp * rho + 2.0 * dp;
            dp = dp * rho + p;
            p = p * rho + c;
        }
        (p, dp, ddp)
    }
}

/// `base + amplitude · sin(frequency · ρ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineModulated {
    pub base: f64,
    pub amplitude: f64,
    pub frequency: f64,
}

impl Coefficient for SineModulated {
    fn derivs(&self, _xi: f64, rho: f64) -> (f64, f64, f64) {
        let (s, c) = (self.frequency * rho).sin_cos();
        let a = self.amplitude;
        let w = self.frequency;
        (self.base + a * s, a * w * c, -a * w * w * s)
    }
}

type ScalarClosure = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// User-supplied coefficient with hand-written derivatives.
#[derive(Clone)]
pub struct Closure {
    pub name: String,
    pub f: ScalarClosure,
    pub df: ScalarClosure,
    pub d2f: ScalarClosure,
}

impl fmt::Debug for Closure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Closure({})", self.name)
    }
}

impl Coefficient for Closure {
    fn derivs(&self, xi: f64, rho: f64) -> (f64, f64, f64) {
        ((self.f)(xi, rho), (self.df)(xi, rho), (self.d2f)(xi, rho))
    }
}

/// Smooth cutoff: the identity on [-1,1], constant ±2 beyond |r| = 2, odd and
/// non-decreasing. On 1 ≤ r ≤ 2 with s = r - 1 it is
/// `1 + s + S(s)(1 - s)`, `S(s) = 10s³ - 15s⁴ + 6s⁵`, which is C² at both joins.
pub fn gamma_cutoff(r: f64) -> f64 {
    gamma_derivs(r).0
}

/// `(γ, γ′, γ″)` at `r`.
pub fn gamma_derivs(r: f64) -> (f64, f64, f64) {
    let a = r.abs();
    let sign = if r < 0.0 { -1.0 } else { 1.0 };
    if a <= 1.0 {
        (r, 1.0, 0.0)
    } else if a >= 2.0 {
        (2.0 * sign, 0.0, 0.0)
    } else {
        let s = a - 1.0;
        let s2 = s * s;
        let sm = s2 * s * (10.0 - 15.0 * s + 6.0 * s2);
        let dsm = 30.0 * s2 * (1.0 - s) * (1.0 - s);
        let ddsm = 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s);
        let g = 1.0 + s + sm * (1.0 - s);
        let dg = 1.0 + dsm * (1.0 - s) - sm;
        let ddg = ddsm * (1.0 - s) - 2.0 * dsm;
        (sign * g, dg, sign * ddg)
    }
}

/// `f_n(ξ, ρ) = f(ξ, nγ(ρ/n))`.
#[derive(Clone, Debug)]
pub struct Truncated {
    pub inner: Arc<dyn Coefficient>,
    pub n: f64,
}

impl Coefficient for Truncated {
    fn derivs(&self, xi: f64, rho: f64) -> (f64, f64, f64) {
        if rho.abs() <= self.n {
            return self.inner.derivs(xi, rho);
        }
        let (g, dg, ddg) = gamma_derivs(rho / self.n);
        let (f, df, ddf) = self.inner.derivs(xi, self.n * g);
        (f, df * dg, ddf * dg * dg + df * ddg / self.n)
    }
}

/// Reaction term `f` with its growth and dissipativity metadata.
#[derive(Clone, Debug)]
pub struct ReactionSpec {
    pub f: Arc<dyn Coefficient>,
    /// Polynomial growth degree `m ≥ 1`.
    pub deg_m: f64,
    /// Upper bound `λ` for `∂_ρ f`.
    pub lambda_dissip: f64,
    /// `(α, β)` of the strong dissipativity inequality, when known.
    pub h14: Option<(f64, f64)>,
}

/// Diffusion coefficient `g`.
#[derive(Clone, Debug)]
pub struct DiffusionSpec {
    pub g: Arc<dyn Coefficient>,
    pub lip_const: f64,
    /// Lower bound `inf |g|`; zero means no invertibility is claimed.
    pub beta_g: f64,
    /// Upper bound `sup |g|`; infinite when unbounded.
    pub upper_bound: f64,
}

/// `f_n` with chain-rule derivatives. Agrees with `f` on `|ρ| ≤ n`.
pub fn truncate_reaction(f: &ReactionSpec, n: f64) -> Result<ReactionSpec> {
    if !(n >= 1.0) {
        return Err(Error::domain(format!("truncation level must be >= 1, got {n}")));
    }
    Ok(ReactionSpec {
        f: Arc::new(Truncated { inner: f.f.clone(), n }),
        deg_m: f.deg_m,
        lambda_dissip: f.lambda_dissip,
        h14: f.h14,
    })
}

/// Full model: coefficients, grid and the approximation indices (n, M, k).
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub reaction: ReactionSpec,
    pub diffusion: DiffusionSpec,
    /// Truncation level `n`; `None` is the untruncated reaction.
    pub truncation_n: Option<f64>,
    pub grid: Grid,
    /// Number `M` of driven noise modes.
    pub noise_modes: usize,
    /// Yosida parameter; `None` uses the exact Laplacian.
    pub yosida_k: Option<f64>,
    drift: Arc<dyn Coefficient>,
}

impl ModelSpec {
    pub fn new(reaction: ReactionSpec, diffusion: DiffusionSpec, grid: Grid, noise_modes: usize) -> Result<Self> {
        if noise_modes == 0 || noise_modes > grid.len() {
            return Err(Error::ModeIndex { index: noise_modes, max: grid.len() });
        }
        let drift = reaction.f.clone();
        Ok(Self { reaction, diffusion, truncation_n: None, grid, noise_modes, yosida_k: None, drift })
    }

    pub fn with_truncation(mut self, n: Option<f64>) -> Result<Self> {
        self.drift = match n {
            Some(level) => truncate_reaction(&self.reaction, level)?.f,
            None => self.reaction.f.clone(),
        };
        self.truncation_n = n;
        Ok(self)
    }

    pub fn with_yosida(mut self, k: Option<f64>) -> Result<Self> {
        if let Some(k) = k {
            if !(k > 0.0) {
                return Err(Error::domain(format!("Yosida parameter must be positive, got {k}")));
            }
        }
        self.yosida_k = k;
        Ok(self)
    }

    pub fn with_noise_modes(mut self, m: usize) -> Result<Self> {
        if m == 0 || m > self.grid.len() {
            return Err(Error::ModeIndex { index: m, max: self.grid.len() });
        }
        self.noise_modes = m;
        Ok(self)
    }

    pub fn with_grid(self, grid: Grid) -> Result<Self> {
        let m = self.noise_modes.min(grid.len());
        let mut out = Self { grid, ..self };
        out.noise_modes = m;
        Ok(out)
    }

    /// Same model with `g` multiplied by `c`.
    pub fn with_scaled_diffusion(mut self, c: f64) -> Self {
        self.diffusion = DiffusionSpec {
            g: Arc::new(Scaled { inner: self.diffusion.g.clone(), factor: c }),
            lip_const: self.diffusion.lip_const * c.abs(),
            beta_g: self.diffusion.beta_g * c.abs(),
            upper_bound: self.diffusion.upper_bound * c.abs(),
        };
        self
    }

    /// Reaction actually integrated (`f_n` when truncated).
    pub fn drift(&self) -> &Arc<dyn Coefficient> {
        &self.drift
    }

    fn check(&self, x: &Field) -> Result<()> {
        if x.grid() != self.grid {
            Err(Error::GridMismatch { left: self.grid.len(), right: x.grid().len() })
        } else {
            Ok(())
        }
    }

    fn pointwise(&self, x: &Field, c: &dyn Coefficient, order: usize) -> Vec<f64> {
        let g = self.grid;
        x.values()
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let d = c.derivs(g.xi(j), v);
                match order {
                    0 => d.0,
                    1 => d.1,
                    _ => d.2,
                }
            })
            .collect()
    }

    /// `F_n(x)`.
    #[allow(non_snake_case)]
    pub fn apply_F(&self, x: &Field) -> Result<Field> {
        self.check(x)?;
        Ok(Field::from_vec_unchecked(self.grid, self.pointwise(x, self.drift.as_ref(), 0)))
    }

    /// `DF_n(x) y`.
    #[allow(non_snake_case)]
    pub fn apply_DF(&self, x: &Field, y: &Field) -> Result<Field> {
        self.check(x)?;
        self.check(y)?;
        let d = Field::from_vec_unchecked(self.grid, self.pointwise(x, self.drift.as_ref(), 1));
        Ok(d.hadamard(y))
    }

    /// `D²F_n(x)(y₁, y₂)`.
    #[allow(non_snake_case)]
    pub fn apply_D2F(&self, x: &Field, y1: &Field, y2: &Field) -> Result<Field> {
        self.check(x)?;
        self.check(y1)?;
        self.check(y2)?;
        let d = Field::from_vec_unchecked(self.grid, self.pointwise(x, self.drift.as_ref(), 2));
        Ok(d.hadamard(y1).hadamard(y2))
    }

    /// Multiplier field `g(ξ, x(ξ))`.
    pub fn diffusion_field(&self, x: &Field) -> Result<Field> {
        self.check(x)?;
        Ok(Field::from_vec_unchecked(self.grid, self.pointwise(x, self.diffusion.g.as_ref(), 0)))
    }

    /// `G(x) y`.
    #[allow(non_snake_case)]
    pub fn apply_G(&self, x: &Field, y: &Field) -> Result<Field> {
        self.check(y)?;
        Ok(self.diffusion_field(x)?.hadamard(y))
    }

    /// `G(x)⁻¹ y`; needs `inf |g| > 0`.
    #[allow(non_snake_case)]
    pub fn apply_G_inverse(&self, x: &Field, y: &Field) -> Result<Field> {
        self.require_invertible_noise()?;
        self.check(y)?;
        let g = self.diffusion_field(x)?;
        let values = y.values().iter().zip(g.values()).map(|(a, b)| a / b).collect();
        Ok(Field::from_vec_unchecked(self.grid, values))
    }

    pub(crate) fn require_invertible_noise(&self) -> Result<()> {
        if self.diffusion.beta_g > 0.0 {
            Ok(())
        } else {
            Err(Error::HypothesisViolation("inverse of G requires a positive lower bound on |g|".into()))
        }
    }

    /// The Bismut–Elworthy–Li weight integrates `G⁻¹η` against the noise, so
    /// every grid mode must be driven.
    pub(crate) fn require_bel_noise(&self) -> Result<()> {
        self.require_invertible_noise()?;
        if self.noise_modes == self.grid.len() {
            Ok(())
        } else {
            Err(Error::HypothesisViolation(format!(
                "BEL weight needs noise in all {} modes, got {}",
                self.grid.len(),
                self.noise_modes
            )))
        }
    }

    /// Sup of `|g|` sampled over the validation box, or the declared bound.
    pub fn diffusion_sup(&self) -> f64 {
        self.diffusion.upper_bound
    }
}

#[derive(Debug)]
struct Scaled {
    inner: Arc<dyn Coefficient>,
    factor: f64,
}

impl Coefficient for Scaled {
    fn derivs(&self, xi: f64, rho: f64) -> (f64, f64, f64) {
        let (a, b, c) = self.inner.derivs(xi, rho);
        (self.factor * a, self.factor * b, self.factor * c)
    }
}

/// `f = ρ - ρ³`, `g = 1 + 0.1 sin ρ`.
pub fn cubic_default(grid: Grid, noise_modes: usize) -> Result<ModelSpec> {
    let reaction = ReactionSpec {
        f: Arc::new(Polynomial::new(vec![0.0, 1.0, 0.0, -1.0])),
        deg_m: 3.0,
        lambda_dissip: 1.0,
        h14: Some((0.25, 3.0)),
    };
    let diffusion = DiffusionSpec {
        g: Arc::new(SineModulated { base: 1.0, amplitude: 0.1, frequency: 1.0 }),
        lip_const: 0.1,
        beta_g: 0.9,
        upper_bound: 1.1,
    };
    ModelSpec::new(reaction, diffusion, grid, noise_modes)
}

/// `f = -aρ`, `g ≡ σ`.
pub fn ou_linear(grid: Grid, noise_modes: usize, a: f64, sigma: f64) -> Result<ModelSpec> {
    let reaction =
        ReactionSpec { f: Arc::new(Polynomial::new(vec![0.0, -a])), deg_m: 1.0, lambda_dissip: -a, h14: None };
    let diffusion = DiffusionSpec {
        g: Arc::new(Polynomial::constant(sigma)),
        lip_const: 0.0,
        beta_g: sigma.abs(),
        upper_bound: sigma.abs(),
    };
    ModelSpec::new(reaction, diffusion, grid, noise_modes)
}

/// Sampling ranges for [`validate_hypotheses`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingBox {
    pub rho_max: f64,
    pub n_rho: usize,
    pub n_xi: usize,
}

impl Default for SamplingBox {
    fn default() -> Self {
        Self { rho_max: 64.0, n_rho: 4097, n_xi: 5 }
    }
}

/// Outcome of one hypothesis item.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisItem {
    pub id: &'static str,
    pub pass: bool,
    /// Not checked because it is not required for this model.
    pub skipped: bool,
    pub detail: String,
    /// `(ξ, ρ)` at which the worst value was observed.
    pub witness: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HypothesisReport {
    pub items: Vec<HypothesisItem>,
}

impl HypothesisReport {
    pub fn item(&self, id: &str) -> Option<&HypothesisItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn passes(&self, id: &str) -> bool {
        self.item(id).map(|i| i.pass).unwrap_or(false)
    }

    /// Items H1 (growth, dissipativity, g-growth or strong dissipativity).
    pub fn h1(&self) -> bool {
        ["h11", "h12", "h13", "lipschitz"].iter().all(|id| self.passes(id))
    }

    pub fn all_pass(&self) -> bool {
        self.items.iter().all(|i| i.pass)
    }
}

const GROWTH_TOL: f64 = 0.25;

struct Samples {
    xi: Vec<f64>,
    rho: Vec<f64>,
}

impl Samples {
    fn new(b: &SamplingBox) -> Self {
        let nx = b.n_xi.max(1);
        let xi = (0..nx).map(|i| (i as f64 + 0.5) / nx as f64).collect();
        let nr = b.n_rho.max(3);
        let rho = (0..nr).map(|i| -b.rho_max + 2.0 * b.rho_max * i as f64 / (nr - 1) as f64).collect();
        Self { xi, rho }
    }

    /// Max of `|h|` over the sampled `(ξ, ρ)` with `|ρ| ≤ r`, and its location.
    fn shell_max(&self, r: f64, h: &dyn Fn(f64, f64) -> f64) -> (f64, (f64, f64)) {
        let mut best = (f64::NEG_INFINITY, (0.0, 0.0));
        for &x in &self.xi {
            for &p in self.rho.iter().filter(|p| p.abs() <= r) {
                let v = h(x, p);
                if v > best.0 {
                    best = (v, (x, p));
                }
            }
        }
        best
    }
}

/// Local growth exponent `log2(M(R) / M(R/2))` of `h` on the sampled box.
fn growth_exponent(s: &Samples, r: f64, h: &dyn Fn(f64, f64) -> f64) -> f64 {
    let hi = s.shell_max(r, h).0;
    let lo = s.shell_max(0.5 * r, h).0;
    if hi <= 1.0 || lo <= 0.0 {
        // Bounded or vanishing: no polynomial growth detectable.
        0.0
    } else {
        (hi / lo.max(1.0)).log2()
    }
}

/// Sampling-based check of the growth, dissipativity and noise hypotheses.
pub fn validate_hypotheses(model: &ModelSpec, b: &SamplingBox) -> HypothesisReport {
    let s = Samples::new(b);
    let r = b.rho_max;
    let f = model.reaction.f.clone();
    let g = model.diffusion.g.clone();
    let m = model.reaction.deg_m;
    let mut items = Vec::new();

    // Growth of D^j f.
    let mut growth_ok = true;
    let mut detail = String::new();
    let mut witness = None;
    for j in 0..3usize {
        let h = |x: f64, p: f64| {
            let d = f.derivs(x, p);
            [d.0, d.1, d.2][j].abs()
        };
        let allowed = (m - j as f64).max(0.0);
        let exp = growth_exponent(&s, r, &h);
        let (c_j, _) = s.shell_max(r, &|x, p| h(x, p) / (1.0 + p.abs().powf(allowed)));
        let ok = exp <= allowed + GROWTH_TOL && c_j.is_finite();
        if !ok && witness.is_none() {
            witness = Some(s.shell_max(r, &h).1);
        }
        growth_ok &= ok;
        detail.push_str(&format!("j={j}: exponent {exp:.3} (allowed {allowed}), c_{j}={c_j:.4e}; "));
    }
    items.push(HypothesisItem { id: "h11", pass: growth_ok, skipped: false, detail, witness });

    // sup f' ≤ λ.
    let lam = model.reaction.lambda_dissip;
    let (sup_df, at) = s.shell_max(r, &|x, p| f.derivs(x, p).1);
    let ok = sup_df <= lam + 1e-9;
    items.push(HypothesisItem {
        id: "h12",
        pass: ok,
        skipped: false,
        detail: format!("sup f' = {sup_df:.6e}, lambda = {lam}"),
        witness: if ok { None } else { Some(at) },
    });

    // Lipschitz constant of g.
    let (lip, at) = s.shell_max(r, &|x, p| g.derivs(x, p).1.abs());
    let declared = model.diffusion.lip_const;
    let ok = lip <= declared + 1e-9;
    items.push(HypothesisItem {
        id: "lipschitz",
        pass: ok,
        skipped: false,
        detail: format!("sup |g'| = {lip:.6e}, declared {declared}"),
        witness: if ok { None } else { Some(at) },
    });

    // Strong dissipativity, when constants are provided.
    let h14_ok = match model.reaction.h14 {
        Some((alpha, beta)) => {
            let nr = s.rho.len().min(801);
            let grid: Vec<f64> = (0..nr).map(|i| -r + 2.0 * r * i as f64 / (nr - 1) as f64).collect();
            let mut worst = (f64::NEG_INFINITY, (0.0, 0.0));
            for &x in &s.xi {
                for &p in &grid {
                    for &q in &grid {
                        let lhs = (f.value(x, p + q) - f.value(x, p)) * q;
                        let excess = lhs + alpha * q.abs().powf(m + 1.0) - beta * (1.0 + p.abs().powf(m + 1.0));
                        if excess > worst.0 {
                            worst = (excess, (x, p));
                        }
                    }
                }
            }
            let ok = worst.0 <= 1e-9;
            items.push(HypothesisItem {
                id: "h14",
                pass: ok,
                skipped: false,
                detail: format!("alpha = {alpha}, beta = {beta}, max excess {:.4e}", worst.0),
                witness: if ok { None } else { Some(worst.1) },
            });
            ok
        }
        None => {
            items.push(HypothesisItem {
                id: "h14",
                pass: true,
                skipped: true,
                detail: "no constants provided".into(),
                witness: None,
            });
            false
        }
    };

    // Sublinear growth of g, needed only without strong dissipativity.
    if h14_ok {
        items.push(HypothesisItem {
            id: "h13",
            pass: true,
            skipped: true,
            detail: "not required: strong dissipativity holds".into(),
            witness: None,
        });
    } else {
        let h = |x: f64, p: f64| g.value(x, p).abs();
        let exp = growth_exponent(&s, r, &h);
        let ok = exp <= 1.0 / m + GROWTH_TOL;
        items.push(HypothesisItem {
            id: "h13",
            pass: ok,
            skipped: false,
            detail: format!("growth exponent of |g| {exp:.3}, allowed {:.3}", 1.0 / m),
            witness: if ok { None } else { Some(s.shell_max(r, &h).1) },
        });
    }

    // Invertible noise.
    let (neg_inf_g, at) = s.shell_max(r, &|x, p| -g.value(x, p).abs());
    let inf_g = -neg_inf_g;
    let ok = inf_g > 0.0 && inf_g + 1e-12 >= model.diffusion.beta_g;
    items.push(HypothesisItem {
        id: "H2",
        pass: ok,
        skipped: false,
        detail: format!("inf |g| = {inf_g:.6e}, declared beta_g = {}", model.diffusion.beta_g),
        witness: if ok { None } else { Some(at) },
    });

    // Strict dissipativity of A + F' and bounded g.
    let alpha = PI * PI - sup_df;
    let (sup_g, at_g) = s.shell_max(r, &|x, p| g.value(x, p).abs());
    let bounded = sup_g <= model.diffusion.upper_bound + 1e-12 && model.diffusion.upper_bound.is_finite();
    let ok = alpha > 0.0 && bounded;
    items.push(HypothesisItem {
        id: "H3",
        pass: ok,
        skipped: false,
        detail: format!("alpha = pi^2 - sup f' = {alpha:.6}, sup |g| = {sup_g:.6e}"),
        witness: if ok {
            None
        } else if alpha <= 0.0 {
            Some(at)
        } else {
            Some(at_g)
        },
    });

    HypothesisReport { items }
}

/// Dissipativity margin `π² - sup f′` on the default sampling box.
pub fn dissipativity_margin(model: &ModelSpec) -> f64 {
    let s = Samples::new(&SamplingBox::default());
    let f = model.drift().clone();
    PI * PI - s.shell_max(64.0, &|x, p| f.derivs(x, p).1).0
}

/// `⟨F(x+h) - F(x), δ_h⟩_E`.
pub fn dissipativity_pairing(model: &ModelSpec, x: &Field, h: &Field) -> Result<f64> {
    let xh = x + h;
    let diff = &model.apply_F(&xh)? - &model.apply_F(x)?;
    Ok(subdifferential(h).pair(&diff))
}
