//! C ABI over the core library.
//!
//! Every function returns an [`RdsStatus`]; on failure the message is kept in
//! a thread-local buffer read by [`rds_last_error`]. Panics are caught at the
//! boundary and reported as [`RdsStatus::Internal`]. Models are opaque
//! handles created by [`rds_model_new`] and released by [`rds_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rdspde::coefficients::{cubic_default, ou_linear, validate_hypotheses, ModelSpec, SamplingBox};
use rdspde::flows::evolve_primary;
use rdspde::observable::{Observable, ScalarFn};
use rdspde::semigroup::{estimate_pt, gradient_bel, StreamConfig};
use rdspde::spectral::{Field, Grid};
use rdspde::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RdsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    HypothesisViolation = 3,
    BlowUp = 4,
    Internal = 5,
}

/// Built-in coefficient sets.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RdsPreset {
    /// `f = ρ - ρ³`, `g = 1 + 0.1 sin ρ`.
    CubicDefault = 0,
    /// `f = -aρ`, `g ≡ σ`.
    OuLinear = 1,
}

/// Profiles `χ` of the cylindrical observable `χ(⟨x, e_k⟩)`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RdsChi {
    Identity = 0,
    Tanh = 1,
    Sin = 2,
    Cos = 3,
    Atan = 4,
}

/// Opaque model handle.
pub struct RdsModel {
    model: ModelSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> RdsStatus {
    match e {
        Error::HypothesisViolation(_) => RdsStatus::HypothesisViolation,
        Error::BlowUp { .. } => RdsStatus::BlowUp,
        Error::Io(_) | Error::Csv(_) => RdsStatus::Internal,
        _ => RdsStatus::InvalidArgument,
    }
}

/// Runs `f`, recording errors and panics.
fn guard(f: impl FnOnce() -> Result<(), (RdsStatus, String)>) -> RdsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RdsStatus::Ok
        }
        Ok(Err((s, msg))) => {
            set_error(&msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            RdsStatus::Internal
        }
    }
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (RdsStatus, String)>;
}

impl<T> IntoFfi<T> for rdspde::Result<T> {
    fn ffi(self) -> Result<T, (RdsStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (RdsStatus, String) {
    (RdsStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (RdsStatus, String) {
    (RdsStatus::InvalidArgument, msg.into())
}

unsafe fn model_ref<'a>(m: *const RdsModel) -> Result<&'a ModelSpec, (RdsStatus, String)> {
    m.as_ref().map(|h| &h.model).ok_or_else(|| null("model"))
}

/// Reads `n` initial values; a null `x0` means the zero field.
unsafe fn initial(model: &ModelSpec, x0: *const f64, n: usize) -> Result<Field, (RdsStatus, String)> {
    let g = model.grid;
    if x0.is_null() {
        return Ok(g.zeros());
    }
    if n != g.len() {
        return Err(invalid(format!("x0 has {n} values, the grid has {}", g.len())));
    }
    Field::new(g, std::slice::from_raw_parts(x0, n).to_vec()).ffi()
}

fn chi_of(chi: RdsChi) -> ScalarFn {
    match chi {
        RdsChi::Identity => ScalarFn::Identity,
        RdsChi::Tanh => ScalarFn::Tanh,
        RdsChi::Sin => ScalarFn::Sin,
        RdsChi::Cos => ScalarFn::Cos,
        RdsChi::Atan => ScalarFn::Atan,
    }
}

/// Creates a model on `grid` interior points driven by `noise_modes` modes.
/// `ou_a` and `ou_sigma` are read by the linear preset only. The hypotheses
/// are validated; a violation returns `HYPOTHESIS_VIOLATION` and no handle.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn rds_model_new(
    preset: RdsPreset,
    grid: usize,
    noise_modes: usize,
    ou_a: f64,
    ou_sigma: f64,
    out: *mut *mut RdsModel,
) -> RdsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let g = Grid::new(grid).ffi()?;
        let model = match preset {
            RdsPreset::CubicDefault => cubic_default(g, noise_modes),
            RdsPreset::OuLinear => ou_linear(g, noise_modes, ou_a, ou_sigma),
        }
        .ffi()?;
        let rep = validate_hypotheses(&model, &SamplingBox::default());
        if !rep.all_pass() {
            let failed: Vec<&str> = rep.items.iter().filter(|i| !i.pass).map(|i| i.id).collect();
            return Err((RdsStatus::HypothesisViolation, format!("failed items: {}", failed.join(", "))));
        }
        *out = Box::into_raw(Box::new(RdsModel { model }));
        Ok(())
    })
}

/// Releases a handle from [`rds_model_new`]; null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rds_model_free(model: *mut RdsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of interior grid points of `model`, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rds_model_grid(model: *const RdsModel) -> usize {
    model.as_ref().map(|m| m.model.grid.len()).unwrap_or(0)
}

/// Integrates one trajectory (id `trajectory` of stream `seed`) to `horizon`
/// and writes the final grid values into `out_u[0..n]`.
///
/// # Safety
/// `x0` is null or points to `n` doubles; `out_u` points to `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rds_simulate(
    model: *const RdsModel,
    x0: *const f64,
    n: usize,
    dt: f64,
    horizon: f64,
    seed: u64,
    trajectory: u64,
    out_u: *mut f64,
) -> RdsStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out_u.is_null() {
            return Err(null("out_u"));
        }
        if n != m.grid.len() {
            return Err(invalid(format!("n = {n}, the grid has {}", m.grid.len())));
        }
        let x = initial(m, x0, n)?;
        let sc = StreamConfig::new(seed, dt);
        let cfg = sc.scheme(horizon, vec![horizon]).ffi()?;
        let b = evolve_primary(m, &x, &cfg, &sc.stream(m.noise_modes, trajectory).ffi()?).ffi()?;
        let last = b.u_path.last().ok_or_else(|| invalid("no snapshot"))?;
        std::slice::from_raw_parts_mut(out_u, n).copy_from_slice(last.values());
        Ok(())
    })
}

/// Monte Carlo `P_tφ(x0)` for `φ(x) = χ(⟨x, e_mode⟩)`.
///
/// # Safety
/// `x0` is null or points to `n` doubles; `mean` and `std_error` are writable.
#[no_mangle]
pub unsafe extern "C" fn rds_estimate_pt_mode(
    model: *const RdsModel,
    x0: *const f64,
    n: usize,
    chi: RdsChi,
    mode: usize,
    t: f64,
    dt: f64,
    paths: usize,
    seed: u64,
    mean: *mut f64,
    std_error: *mut f64,
) -> RdsStatus {
    guard(|| {
        let m = model_ref(model)?;
        if mean.is_null() || std_error.is_null() {
            return Err(null("mean or std_error"));
        }
        let x = initial(m, x0, if x0.is_null() { m.grid.len() } else { n })?;
        let phi = Observable::cylindrical(chi_of(chi), m.grid.mode(mode).ffi()?);
        let e = estimate_pt(m, &phi, &x, t, paths, &StreamConfig::new(seed, dt)).ffi()?;
        *mean = e.mean;
        *std_error = e.std_error;
        Ok(())
    })
}

/// Bismut–Elworthy–Li estimate of `⟨e_h_mode, D P_tφ(x0)⟩_E` for
/// `φ(x) = χ(⟨x, e_mode⟩)`. Needs invertible noise (`noise_modes = grid`).
///
/// # Safety
/// `x0` is null or points to `n` doubles; `mean` and `std_error` are writable.
#[no_mangle]
pub unsafe extern "C" fn rds_gradient_bel_mode(
    model: *const RdsModel,
    x0: *const f64,
    n: usize,
    chi: RdsChi,
    mode: usize,
    h_mode: usize,
    t: f64,
    dt: f64,
    paths: usize,
    seed: u64,
    mean: *mut f64,
    std_error: *mut f64,
) -> RdsStatus {
    guard(|| {
        let m = model_ref(model)?;
        if mean.is_null() || std_error.is_null() {
            return Err(null("mean or std_error"));
        }
        let x = initial(m, x0, if x0.is_null() { m.grid.len() } else { n })?;
        let phi = Observable::cylindrical(chi_of(chi), m.grid.mode(mode).ffi()?);
        let h = m.grid.mode(h_mode).ffi()?;
        let e = gradient_bel(m, &phi, &x, t, &h, paths, &StreamConfig::new(seed, dt)).ffi()?;
        *mean = e.mean;
        *std_error = e.std_error;
        Ok(())
    })
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn rds_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rds_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
