//! Dirichlet Laplacian on (0,1) in collocation form.
//!
//! A [`Grid`] of `N` interior points `ξ_j = j/(N+1)` carries [`Field`]s with
//! implicit zero boundary values. The sine vectors `e_k(ξ) = √2 sin(kπξ)`,
//! `k = 1..N`, are exactly orthonormal for the trapezoid inner product on this
//! grid, so every diagonal operator of `A` (heat semigroup, Yosida
//! approximation, mode projection) is applied exactly through a discrete sine
//! transform.

use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Uniform interior grid on (0,1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Grid {
    n: usize,
}

impl Grid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::domain(format!("grid needs at least 2 interior points, got {n}")));
        }
        Ok(Self { n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.n as f64 + 1.0)
    }

    /// Location of the zero-based interior index `j`.
    pub fn xi(&self, j: usize) -> f64 {
        (j as f64 + 1.0) * self.spacing()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.xi(j)).collect()
    }

    /// Interior index closest to `xi`; ties go to the smaller index.
    pub fn nearest_index(&self, xi: f64) -> usize {
        let pos = xi * (self.n as f64 + 1.0) - 1.0;
        let lo = pos.floor().clamp(0.0, (self.n - 1) as f64) as usize;
        let hi = (lo + 1).min(self.n - 1);
        if (self.xi(hi) - xi).abs() < (self.xi(lo) - xi).abs() {
            hi
        } else {
            lo
        }
    }

    pub fn zeros(&self) -> Field {
        Field { grid: *self, values: vec![0.0; self.n] }
    }

    pub fn field(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { grid: *self, values: self.points().into_iter().map(f).collect() }
    }

    /// Grid samples of `e_k`; `k` is one-based.
    pub fn mode(&self, k: usize) -> Result<Field> {
        check_mode(k, self.n)?;
        Ok(self.field(|x| SQRT_2 * (k as f64 * PI * x).sin()))
    }
}

/// Dirichlet eigenvalue `-k²π²` of the Laplacian on (0,1).
pub fn eigenvalue(k: usize) -> f64 {
    let k = k as f64;
    -k * k * PI * PI
}

fn check_mode(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        Err(Error::ModeIndex { index: k, max: n })
    } else {
        Ok(())
    }
}

/// Grid samples of a continuous function on [0,1] vanishing at both ends.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::domain(format!(
                "field has {} values for a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite field value at index {j}")));
        }
        Ok(Self { grid, values })
    }

    pub(crate) fn from_vec_unchecked(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn same_grid(&self, other: &Field) -> Result<()> {
        if self.grid != other.grid {
            Err(Error::GridMismatch { left: self.grid.len(), right: other.grid.len() })
        } else {
            Ok(())
        }
    }

    /// `|x|_E`, the sup norm over the grid.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `|x|_H` with the trapezoid rule (boundary values are zero).
    pub fn l2_norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.grid.spacing() * self.values.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// `⟨x, y⟩_H` with the trapezoid rule.
    pub fn inner(&self, other: &Field) -> f64 {
        debug_assert_eq!(self.grid, other.grid);
        self.grid.spacing() * dot(&self.values, &other.values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    /// Pointwise product.
    pub fn hadamard(&self, other: &Field) -> Field {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect();
        Field { grid: self.grid, values }
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Field) {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl<'a> Add<&'a Field> for &'a Field {
    type Output = Field;
    fn add(self, rhs: &'a Field) -> Field {
        let mut out = self.clone();
        out.axpy(1.0, rhs);
        out
    }
}

impl<'a> Sub<&'a Field> for &'a Field {
    type Output = Field;
    fn sub(self, rhs: &'a Field) -> Field {
        let mut out = self.clone();
        out.axpy(-1.0, rhs);
        out
    }
}

impl Mul<f64> for &Field {
    type Output = Field;
    fn mul(self, a: f64) -> Field {
        self.map(|v| a * v)
    }
}

impl Neg for &Field {
    type Output = Field;
    fn neg(self) -> Field {
        self.map(|v| -v)
    }
}

/// DST-I built on a real-odd FFT of length `2(N+1)`.
pub(crate) struct SineTransform {
    n: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for SineTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SineTransform").field("n", &self.n).finish()
    }
}

impl SineTransform {
    fn new(n: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(2 * (n + 1));
        Self { n, fft }
    }

    /// Cached transform for grids of `n` points.
    pub(crate) fn for_len(n: usize) -> Arc<SineTransform> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<SineTransform>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("sine transform cache poisoned");
        guard.entry(n).or_insert_with(|| Arc::new(SineTransform::new(n))).clone()
    }

    /// `out[k] = Σ_j input[j] sin(π (j+1)(k+1) / (N+1))`.
    pub(crate) fn dst1(&self, input: &[f64]) -> Vec<f64> {
        let n = self.n;
        let m = 2 * (n + 1);
        let mut buf = vec![Complex::new(0.0, 0.0); m];
        for (j, &v) in input.iter().enumerate() {
            buf[j + 1].re = v;
            buf[m - j - 1].re = -v;
        }
        self.fft.process(&mut buf);
        (1..=n).map(|k| -0.5 * buf[k].im).collect()
    }

    /// Sine coefficients `⟨x, e_k⟩_H`, `k = 1..N`.
    pub(crate) fn forward(&self, values: &[f64]) -> Vec<f64> {
        let scale = SQRT_2 / (self.n as f64 + 1.0);
        self.dst1(values).into_iter().map(|c| scale * c).collect()
    }

    /// Grid values of `Σ_k c_k e_k`.
    pub(crate) fn inverse(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut padded = coeffs.to_vec();
        padded.resize(self.n, 0.0);
        self.dst1(&padded).into_iter().map(|v| SQRT_2 * v).collect()
    }
}

/// Coefficients of a field against the first `coeffs.len()` sine modes.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralVector {
    pub coeffs: Vec<f64>,
}

impl SpectralVector {
    pub fn from_field(x: &Field, k_max: usize) -> Result<Self> {
        check_mode(k_max, x.grid.len())?;
        let mut coeffs = SineTransform::for_len(x.grid.len()).forward(&x.values);
        coeffs.truncate(k_max);
        Ok(Self { coeffs })
    }

    pub fn to_field(&self, grid: Grid) -> Result<Field> {
        if self.coeffs.len() > grid.len() {
            return Err(Error::ModeIndex { index: self.coeffs.len(), max: grid.len() });
        }
        let values = SineTransform::for_len(grid.len()).inverse(&self.coeffs);
        Ok(Field::from_vec_unchecked(grid, values))
    }

    pub fn k_max(&self) -> usize {
        self.coeffs.len()
    }
}

/// Apply the diagonal operator with multiplier `m(k)` on mode `k` (one-based).
pub fn apply_diagonal(x: &Field, m: impl Fn(usize) -> f64) -> Field {
    let tr = SineTransform::for_len(x.grid.len());
    let coeffs: Vec<f64> = tr.forward(&x.values).into_iter().enumerate().map(|(i, c)| c * m(i + 1)).collect();
    Field::from_vec_unchecked(x.grid, tr.inverse(&coeffs))
}

/// Grid samples of `e_k` together with its eigenvalue `-k²π²`.
pub fn eigenpair(grid: Grid, k: usize) -> Result<(Field, f64)> {
    Ok((grid.mode(k)?, eigenvalue(k)))
}

/// `e^{tA} x`. At `t = 0` this is the projection onto the resolvable modes,
/// which on the grid is the identity up to round-off.
pub fn heat_semigroup(x: &Field, t: f64) -> Result<Field> {
    if !(t >= 0.0) {
        return Err(Error::domain(format!("heat semigroup needs t >= 0, got {t}")));
    }
    Ok(apply_diagonal(x, |k| (eigenvalue(k) * t).exp()))
}

/// Multiplier of the Yosida approximation `kA(k-A)^{-1}` on mode `j`.
pub fn yosida_multiplier(j: usize, k: f64) -> f64 {
    let a = -eigenvalue(j);
    -k * a / (k + a)
}

pub fn yosida_apply(x: &Field, k: f64) -> Result<Field> {
    if !(k > 0.0) {
        return Err(Error::domain(format!("Yosida parameter must be positive, got {k}")));
    }
    Ok(apply_diagonal(x, |j| yosida_multiplier(j, k)))
}

/// `P_M x`: keep the first `m` sine modes.
pub fn project_modes(x: &Field, m: usize) -> Result<Field> {
    check_mode(m, x.grid.len())?;
    Ok(apply_diagonal(x, |k| if k <= m { 1.0 } else { 0.0 }))
}

/// Local average `x_n(ξ) = (n/2) ∫_{ξ-1/n}^{ξ+1/n} x̂(η) dη` of the odd extension
/// of `x` to (-1,2), with `x` read as its piecewise-linear interpolant.
///
/// The antiderivative `P(s) = ∫_0^s x̂` is even and satisfies `P(s) = P(2-s)`
/// on [1,2], so only the cumulative integral over [0,1] is needed.
pub fn mollify(x: &Field, n: usize) -> Result<Field> {
    if n == 0 {
        return Err(Error::domain("mollification index must be >= 1"));
    }
    let grid = x.grid;
    let h = grid.spacing();
    let mut nodes = Vec::with_capacity(grid.len() + 2);
    nodes.push(0.0);
    nodes.extend_from_slice(&x.values);
    nodes.push(0.0);
    let cells = nodes.len() - 1;
    let mut cumulative = vec![0.0; nodes.len()];
    for i in 0..cells {
        cumulative[i + 1] = cumulative[i] + 0.5 * h * (nodes[i] + nodes[i + 1]);
    }
    let base = |s: f64| -> f64 {
        let s = s.clamp(0.0, 1.0);
        let i = ((s / h).floor() as usize).min(cells - 1);
        let tau = s - i as f64 * h;
        cumulative[i] + nodes[i] * tau + (nodes[i + 1] - nodes[i]) * tau * tau / (2.0 * h)
    };
    let antiderivative = |s: f64| -> f64 {
        if s <= 1.0 {
            base(s.abs())
        } else {
            base(2.0 - s)
        }
    };
    let r = 1.0 / n as f64;
    let half_n = 0.5 * n as f64;
    let values =
        grid.points().into_iter().map(|xi| half_n * (antiderivative(xi + r) - antiderivative(xi - r))).collect();
    Ok(Field::from_vec_unchecked(grid, values))
}

/// Element of `E*` represented on the grid.
#[derive(Clone, Debug, PartialEq)]
pub enum DualFunctional {
    /// `weight · δ_{ξ_index}`.
    PointMass { index: usize, weight: f64 },
    /// `y ↦ ∫ y w dξ`.
    Density(Field),
}

impl DualFunctional {
    /// `⟨y, self⟩_E`.
    pub fn pair(&self, y: &Field) -> f64 {
        match self {
            DualFunctional::PointMass { index, weight } => weight * y.values[*index],
            DualFunctional::Density(w) => y.inner(w),
        }
    }

    /// Operator norm in `E*`.
    pub fn dual_norm(&self) -> f64 {
        match self {
            DualFunctional::PointMass { weight, .. } => weight.abs(),
            DualFunctional::Density(w) => w.l1_norm(),
        }
    }

    pub fn scaled(&self, a: f64) -> DualFunctional {
        match self {
            DualFunctional::PointMass { index, weight } => {
                DualFunctional::PointMass { index: *index, weight: a * weight }
            }
            DualFunctional::Density(w) => DualFunctional::Density(w * a),
        }
    }
}

/// Norm-one element `δ_x` of the subdifferential of `|·|_E` at `x`: a signed
/// point evaluation at the first grid point where `|x|` is maximal. The zero
/// field gets `+δ_{1/2}`.
pub fn subdifferential(x: &Field) -> DualFunctional {
    if x.is_zero() {
        return DualFunctional::PointMass { index: x.grid.nearest_index(0.5), weight: 1.0 };
    }
    let mut best = 0;
    for (j, v) in x.values.iter().enumerate() {
        if v.abs() > x.values[best].abs() {
            best = j;
        }
    }
    DualFunctional::PointMass { index: best, weight: x.values[best].signum() }
}
