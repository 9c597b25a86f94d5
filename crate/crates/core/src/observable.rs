//! Functionals on `E` with optional first and second derivative metadata.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::spectral::{DualFunctional, Field};

/// Scalar profile `χ` used by cylindrical and evaluation observables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScalarFn {
    Identity,
    Tanh,
    Sin,
    Cos,
    Atan,
    Square,
    /// `r ↦ r / (1 + r²)`.
    Rational,
    Constant(f64),
}

impl ScalarFn {
    /// `(χ, χ′, χ″)` at `r`.
    pub fn derivs(&self, r: f64) -> (f64, f64, f64) {
        match *self {
            ScalarFn::Identity => (r, 1.0, 0.0),
            ScalarFn::Tanh => {
                let t = r.tanh();
                let s = 1.0 - t * t;
                (t, s, -2.0 * t * s)
            }
            ScalarFn::Sin => {
                let (s, c) = r.sin_cos();
                (s, c, -s)
            }
            ScalarFn::Cos => {
                let (s, c) = r.sin_cos();
                (c, -s, -c)
            }
            ScalarFn::Atan => {
                let d = 1.0 / (1.0 + r * r);
                (r.atan(), d, -2.0 * r * d * d)
            }
            ScalarFn::Square => (r * r, 2.0 * r, 2.0),
            ScalarFn::Rational => {
                let q = 1.0 + r * r;
                (r / q, (1.0 - r * r) / (q * q), 2.0 * r * (r * r - 3.0) / (q * q * q))
            }
            ScalarFn::Constant(c) => (c, 0.0, 0.0),
        }
    }

    pub fn value(&self, r: f64) -> f64 {
        self.derivs(r).0
    }

    /// `sup |χ|`, infinite when unbounded.
    pub fn sup(&self) -> f64 {
        match *self {
            ScalarFn::Tanh | ScalarFn::Sin | ScalarFn::Cos => 1.0,
            ScalarFn::Atan => FRAC_PI_2,
            ScalarFn::Rational => 0.5,
            ScalarFn::Constant(c) => c.abs(),
            ScalarFn::Identity | ScalarFn::Square => f64::INFINITY,
        }
    }

    /// `sup |χ′|`, infinite when unbounded.
    pub fn sup_derivative(&self) -> f64 {
        match *self {
            ScalarFn::Identity
            | ScalarFn::Tanh
            | ScalarFn::Sin
            | ScalarFn::Cos
            | ScalarFn::Atan
            | ScalarFn::Rational => 1.0,
            ScalarFn::Constant(_) => 0.0,
            ScalarFn::Square => f64::INFINITY,
        }
    }

    pub fn name(&self) -> String {
        match self {
            ScalarFn::Identity => "id".into(),
            ScalarFn::Tanh => "tanh".into(),
            ScalarFn::Sin => "sin".into(),
            ScalarFn::Cos => "cos".into(),
            ScalarFn::Atan => "atan".into(),
            ScalarFn::Square => "sq".into(),
            ScalarFn::Rational => "rat".into(),
            ScalarFn::Constant(c) => format!("const({c})"),
        }
    }
}

type FieldFn = Arc<dyn Fn(&Field) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&Field) -> DualFunctional + Send + Sync>;

/// A functional `φ` on `E`.
#[derive(Clone)]
pub enum Observable {
    /// `χ(⟨x, w⟩_H)`.
    Cylindrical { chi: ScalarFn, w: Field },
    /// `χ(x(ξ_index))`.
    Evaluation { chi: ScalarFn, index: usize },
    /// `⟨x, w₁⟩_H ⟨x, w₂⟩_H`.
    Product { w1: Field, w2: Field },
    /// `φ(x)²` for an inner observable with derivatives.
    Squared(Arc<Observable>),
    /// Arbitrary evaluator with an optional gradient.
    Custom { name: String, f: FieldFn, grad: Option<GradFn>, sup: Option<f64> },
}

impl fmt::Debug for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Observable({})", self.name())
    }
}

impl Observable {
    pub fn cylindrical(chi: ScalarFn, w: Field) -> Self {
        Observable::Cylindrical { chi, w }
    }

    pub fn constant(c: f64, grid_field: Field) -> Self {
        Observable::Cylindrical { chi: ScalarFn::Constant(c), w: grid_field }
    }

    pub fn name(&self) -> String {
        match self {
            Observable::Cylindrical { chi, .. } => format!("{}(<x,w>)", chi.name()),
            Observable::Evaluation { chi, index } => format!("{}(x[{index}])", chi.name()),
            Observable::Product { .. } => "<x,w1><x,w2>".into(),
            Observable::Squared(inner) => format!("({})^2", inner.name()),
            Observable::Custom { name, .. } => name.clone(),
        }
    }

    pub fn eval(&self, x: &Field) -> f64 {
        match self {
            Observable::Cylindrical { chi, w } => chi.value(x.inner(w)),
            Observable::Evaluation { chi, index } => chi.value(x.values()[*index]),
            Observable::Product { w1, w2 } => x.inner(w1) * x.inner(w2),
            Observable::Squared(inner) => inner.eval(x).powi(2),
            Observable::Custom { f, .. } => f(x),
        }
    }

    /// `Dφ(x)` as an element of `E*`.
    pub fn gradient(&self, x: &Field) -> Result<DualFunctional> {
        Ok(match self {
            Observable::Cylindrical { chi, w } => DualFunctional::Density(w * chi.derivs(x.inner(w)).1),
            Observable::Evaluation { chi, index } => {
                DualFunctional::PointMass { index: *index, weight: chi.derivs(x.values()[*index]).1 }
            }
            Observable::Product { w1, w2 } => {
                let mut d = w1 * x.inner(w2);
                d.axpy(x.inner(w1), w2);
                DualFunctional::Density(d)
            }
            Observable::Squared(inner) => inner.gradient(x)?.scaled(2.0 * inner.eval(x)),
            Observable::Custom { grad, .. } => match grad {
                Some(g) => g(x),
                None => return Err(Error::MissingDerivative("gradient")),
            },
        })
    }

    pub fn has_gradient(&self) -> bool {
        match self {
            Observable::Custom { grad, .. } => grad.is_some(),
            Observable::Squared(inner) => inner.has_gradient(),
            _ => true,
        }
    }

    /// `⟨h, Dφ(x)⟩_E`.
    pub fn directional(&self, x: &Field, h: &Field) -> Result<f64> {
        Ok(match self {
            Observable::Cylindrical { chi, w } => chi.derivs(x.inner(w)).1 * h.inner(w),
            Observable::Evaluation { chi, index } => chi.derivs(x.values()[*index]).1 * h.values()[*index],
            Observable::Product { w1, w2 } => h.inner(w1) * x.inner(w2) + x.inner(w1) * h.inner(w2),
            _ => self.gradient(x)?.pair(h),
        })
    }

    /// `D²φ(x)(h, k)`.
    pub fn second(&self, x: &Field, h: &Field, k: &Field) -> Result<f64> {
        Ok(match self {
            Observable::Cylindrical { chi, w } => chi.derivs(x.inner(w)).2 * h.inner(w) * k.inner(w),
            Observable::Evaluation { chi, index } => {
                chi.derivs(x.values()[*index]).2 * h.values()[*index] * k.values()[*index]
            }
            Observable::Product { w1, w2 } => h.inner(w1) * k.inner(w2) + k.inner(w1) * h.inner(w2),
            Observable::Squared(inner) => {
                2.0 * inner.directional(x, h)? * inner.directional(x, k)?
                    + 2.0 * inner.eval(x) * inner.second(x, h, k)?
            }
            Observable::Custom { .. } => return Err(Error::MissingDerivative("second derivative")),
        })
    }

    /// `sup |φ|` when known.
    pub fn sup(&self) -> Option<f64> {
        let s = match self {
            Observable::Cylindrical { chi, .. } | Observable::Evaluation { chi, .. } => chi.sup(),
            Observable::Product { .. } => f64::INFINITY,
            Observable::Squared(inner) => inner.sup()?.powi(2),
            Observable::Custom { sup, .. } => (*sup)?,
        };
        s.is_finite().then_some(s)
    }

    /// `sup_x |Dφ(x)|_{E*}` when known.
    pub fn gradient_sup(&self) -> Option<f64> {
        let s = match self {
            Observable::Cylindrical { chi, w } => chi.sup_derivative() * w.l1_norm(),
            Observable::Evaluation { chi, .. } => chi.sup_derivative(),
            _ => return None,
        };
        s.is_finite().then_some(s)
    }

    /// `|Dφ(x)|_{E*}`.
    pub fn gradient_norm(&self, x: &Field) -> Result<f64> {
        Ok(self.gradient(x)?.dual_norm())
    }

    /// True when `φ` is constant (zero gradient everywhere).
    pub fn is_constant(&self) -> bool {
        matches!(self, Observable::Cylindrical { chi: ScalarFn::Constant(_), .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::Grid;

    fn fd_check(obs: &Observable, x: &Field, h: &Field) {
        let e = 1e-5;
        let xp = &(x + &(h * e));
        let xm = &(x - &(h * e));
        let fd = (obs.eval(xp) - obs.eval(xm)) / (2.0 * e);
        let d = obs.directional(x, h).unwrap();
        assert!((fd - d).abs() < 1e-6 * (1.0 + d.abs()), "{} fd {fd} vs {d}", obs.name());
        let g = obs.gradient(x).unwrap().pair(h);
        assert!((g - d).abs() < 1e-12 * (1.0 + d.abs()));
        let fdd = (obs.directional(xp, h).unwrap() - obs.directional(xm, h).unwrap()) / (2.0 * e);
        let dd = obs.second(x, h, h).unwrap();
        assert!((fdd - dd).abs() < 1e-5 * (1.0 + dd.abs()), "{} second fd {fdd} vs {dd}", obs.name());
    }

    #[test]
    fn derivatives_agree_with_differences() {
        let g = Grid::new(24).unwrap();
        let x = g.field(|s| 1.3 * (3.0 * s).sin() * s * (1.0 - s) * 4.0);
        let h = g.field(|s| s * (1.0 - s) * (1.0 + s));
        let e1 = g.mode(1).unwrap();
        let e2 = g.mode(2).unwrap();
        for chi in [
            ScalarFn::Identity,
            ScalarFn::Tanh,
            ScalarFn::Sin,
            ScalarFn::Cos,
            ScalarFn::Atan,
            ScalarFn::Square,
            ScalarFn::Rational,
        ] {
            fd_check(&Observable::cylindrical(chi, e1.clone()), &x, &h);
            fd_check(&Observable::Evaluation { chi, index: 11 }, &x, &h);
        }
        let p = Observable::Product { w1: e1.clone(), w2: e2 };
        fd_check(&p, &x, &h);
        fd_check(&Observable::Squared(Arc::new(Observable::cylindrical(ScalarFn::Tanh, e1))), &x, &h);
    }

    #[test]
    fn gradient_norms() {
        let g = Grid::new(255).unwrap();
        let e1 = g.mode(1).unwrap();
        let obs = Observable::cylindrical(ScalarFn::Identity, e1.clone());
        let n = obs.gradient_norm(&g.zeros()).unwrap();
        let exact = 2.0 * 2f64.sqrt() / std::f64::consts::PI;
        assert!((n - exact).abs() < 1e-4);
        let ev = Observable::Evaluation { chi: ScalarFn::Tanh, index: 3 };
        assert_eq!(ev.gradient_norm(&g.zeros()).unwrap(), 1.0);
        assert_eq!(ev.sup(), Some(1.0));
        assert_eq!(obs.sup(), None);
    }

    #[test]
    fn custom_without_gradient() {
        let g = Grid::new(4).unwrap();
        let c = Observable::Custom { name: "sup".into(), f: Arc::new(|x: &Field| x.sup_norm()), grad: None, sup: None };
        assert!(matches!(c.gradient(&g.zeros()), Err(Error::MissingDerivative(_))));
        assert!(!c.has_gradient());
    }
}
