//! C ABI over `fstoch`.
//!
//! Models are opaque heap handles owned by the caller and released with
//! [`fstoch_model_free`]. Every fallible call returns an [`FstochStatus`]; on failure the
//! message is kept per thread and read back with [`fstoch_last_error`]. Panics never
//! cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fstoch::combine::{
    escape_surrogate, estimate_varrho, predict, regular_stats, sensitivities, sliding_stats, PhaseInputs,
};
use fstoch::escape::knessl_pdf;
use fstoch::filippov::{build_relay_model, FilippovSde, NoiseSpec, PhaseAnchors, RelayModel, RelayParams};
use fstoch::mc::{oscillation_times, sample_passages, Direction, Plane, ReturnProtocol, SimConfig};
use fstoch::regular::RegularTheory;
use fstoch::Error;

/// Result codes. `Ok` is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FstochStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    /// Quadrature, root finding or a degenerate covariance.
    Numerical = 3,
    /// A passage or sliding boundary was not reached.
    NoPassage = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Values of the `phase` argument of [`fstoch_sample_passages`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FstochPhase {
    /// From `x_Γ^E` to the manifold.
    Regular = 0,
    /// From `x_Γ^M` to `x₂ = δ⁻`.
    Sliding = 1,
    /// From `x_Γ^S` to `x₂ = δ⁺`.
    Escape = 2,
}

/// Relay model with its deterministic anchors; opaque to C.
pub struct FstochModel {
    model: RelayModel,
    anchors: PhaseAnchors,
    sys: FilippovSde,
}

/// Deterministic anchors in transformed coordinates.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FstochAnchors {
    pub z: f64,
    pub t_s: f64,
    pub t_e: f64,
    pub t_r: f64,
    pub t_osc: f64,
    pub x_m: [f64; 3],
    pub x_s: [f64; 3],
    pub x_e: [f64; 3],
    pub x_r: [f64; 3],
}

/// Oscillation-time prediction with the nine chained terms of each sum.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FstochPrediction {
    pub diff_half: f64,
    pub diff_osc: f64,
    pub var_half: f64,
    pub var_osc: f64,
    pub std_half: f64,
    pub std_osc: f64,
    pub varrho: f64,
    pub diff_terms: [f64; 9],
    pub var_terms: [f64; 9],
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FstochStatus {
    match e {
        Error::InvalidInput(_) | Error::SideRequired | Error::NotEscapePoint(_) | Error::NormalForm(_) => {
            FstochStatus::InvalidInput
        }
        Error::NoPassage { .. }
        | Error::PassageNotReached { .. }
        | Error::SlidingBoundaryReached { .. }
        | Error::NoSlidingRoot
        | Error::OutsideSlidingRegion { .. } => FstochStatus::NoPassage,
        _ => FstochStatus::Numerical,
    }
}

/// Runs `f`, mapping errors and panics to status codes.
fn guard<F: FnOnce() -> Result<(), (FstochStatus, String)>>(f: F) -> FstochStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FstochStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside fstoch".into());
            FstochStatus::Panic
        }
    }
}

fn lib<T>(r: fstoch::Result<T>) -> Result<T, (FstochStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (FstochStatus, String) {
    (FstochStatus::NullPointer, format!("{what} is null"))
}

fn arr3(v: &[f64]) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fstoch_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error of this thread into `buf` (NUL-terminated, truncated to `len`).
/// Returns the full message length, 0 when there is none.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fstoch_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                // SAFETY: caller guarantees `len` writable bytes at `buf`
                ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Builds the relay model. `noise` is `"B"`, `"e1"` or `"matrix:<9 values>"`; null means `"B"`.
///
/// # Safety
/// `noise` must be null or a valid NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fstoch_model_new(
    zeta: f64,
    lambda: f64,
    omega: f64,
    delta_minus: f64,
    delta_plus: f64,
    noise: *const c_char,
    out: *mut *mut FstochModel,
) -> FstochStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec: NoiseSpec = if noise.is_null() {
            NoiseSpec::B
        } else {
            // SAFETY: caller guarantees a NUL-terminated string
            let s = CStr::from_ptr(noise).to_str().map_err(|_| (FstochStatus::InvalidInput, "noise is not UTF-8".into()))?;
            lib(s.parse())?
        };
        let (model, anchors) = lib(build_relay_model(RelayParams { zeta, lambda, omega }, delta_minus, delta_plus))?;
        let sys = lib(model.system(&spec))?;
        *out = Box::into_raw(Box::new(FstochModel { model, anchors, sys }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`fstoch_model_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fstoch_model_free(model: *mut FstochModel) {
    if !model.is_null() {
        // SAFETY: handle came from Box::into_raw in fstoch_model_new
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fstoch_model_anchors(model: *const FstochModel, out: *mut FstochAnchors) -> FstochStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let a = &m.anchors;
        *out = FstochAnchors {
            z: m.model.z,
            t_s: a.t_gamma_s,
            t_e: a.t_gamma_e,
            t_r: a.t_gamma_r,
            t_osc: a.t_osc_gamma,
            x_m: arr3(&a.x_gamma_m),
            x_s: arr3(&a.x_gamma_s),
            x_e: arr3(&a.x_gamma_e),
            x_r: arr3(&a.x_gamma_r),
        };
        Ok(())
    })
}

/// Escape density `p^E(u, s)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fstoch_escape_pdf(u: f64, s: f64, out: *mut f64) -> FstochStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = lib(knessl_pdf(u, s))?;
        Ok(())
    })
}

/// `n` Monte-Carlo passages of one phase, `phase` an [`FstochPhase`] value. `times` receives `n` values and `locations`
/// `3n` values, row `k` at `3k`.
///
/// # Safety
/// `model` must be a live handle; `times` and `locations` must hold `n` and `3n` doubles.
#[no_mangle]
pub unsafe extern "C" fn fstoch_sample_passages(
    model: *const FstochModel,
    phase: u32,
    eps: f64,
    dt: f64,
    seed: u64,
    n: usize,
    times: *mut f64,
    locations: *mut f64,
) -> FstochStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if times.is_null() || locations.is_null() {
            return Err(null("output buffer"));
        }
        let a = &m.anchors;
        let (x0, plane) = match phase {
            p if p == FstochPhase::Regular as u32 => {
                (&a.x_gamma_e, Plane { index: 0, level: 0.0, direction: Direction::Down })
            }
            p if p == FstochPhase::Sliding as u32 => {
                (&a.x_gamma_m, Plane { index: 1, level: a.delta_minus, direction: Direction::Up })
            }
            p if p == FstochPhase::Escape as u32 => {
                (&a.x_gamma_s, Plane { index: 1, level: a.delta_plus, direction: Direction::Up })
            }
            p => return Err((FstochStatus::InvalidInput, format!("unknown phase {p}"))),
        };
        let cfg = SimConfig { eps, dt, seed, n_samples: n, ..Default::default() };
        let samples = lib(sample_passages(&m.sys, &cfg, x0, &plane))?;
        // SAFETY: caller guarantees n and 3n doubles
        let t = std::slice::from_raw_parts_mut(times, n);
        let l = std::slice::from_raw_parts_mut(locations, 3 * n);
        for (k, s) in samples.iter().enumerate() {
            t[k] = s.time;
            l[3 * k..3 * k + 3].copy_from_slice(&s.location);
        }
        Ok(())
    })
}

/// Oscillation and half-oscillation times along one path from `x_Γ^M`. Writes up to
/// `capacity` values into each buffer and the counts into `n_osc_out`, `n_half_out`.
///
/// # Safety
/// `model` must be a live handle; `osc`, `half` must hold `capacity` doubles; the count
/// pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fstoch_oscillation_times(
    model: *const FstochModel,
    eps: f64,
    dt: f64,
    seed: u64,
    n_osc: usize,
    osc: *mut f64,
    half: *mut f64,
    capacity: usize,
    n_osc_out: *mut usize,
    n_half_out: *mut usize,
) -> FstochStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if osc.is_null() || half.is_null() || n_osc_out.is_null() || n_half_out.is_null() {
            return Err(null("output buffer"));
        }
        let cfg = SimConfig { eps, dt, seed, n_samples: 1, ..Default::default() };
        let proto = ReturnProtocol {
            delta_plus: m.anchors.delta_plus,
            mirror_center: Some(m.model.q.as_slice().to_vec()),
        };
        let run = lib(oscillation_times(&m.sys, &cfg, &m.anchors.x_gamma_m, &proto, n_osc))?;
        *n_osc_out = run.t_osc.len();
        *n_half_out = run.t_half.len();
        if run.t_osc.len() > capacity || run.t_half.len() > capacity {
            return Err((FstochStatus::BufferTooSmall, format!("need capacity {}", run.t_half.len())));
        }
        // SAFETY: caller guarantees `capacity` doubles in each buffer
        std::slice::from_raw_parts_mut(osc, run.t_osc.len()).copy_from_slice(&run.t_osc);
        std::slice::from_raw_parts_mut(half, run.t_half.len()).copy_from_slice(&run.t_half);
        Ok(())
    })
}

/// Three-term oscillation prediction at `eps`; the escape surrogate uses
/// `escape_samples` Monte-Carlo passages at `dt = 1e-5` with `seed`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fstoch_predict(
    model: *const FstochModel,
    eps: f64,
    escape_samples: usize,
    seed: u64,
    out: *mut FstochPrediction,
) -> FstochStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if !(eps > 0.0) || escape_samples < 2 {
            return Err((FstochStatus::InvalidInput, "need eps > 0 and escape_samples >= 2".into()));
        }
        let regular = lib(RegularTheory::new(&m.sys, &m.anchors.x_gamma_e, 1e-3))?;
        let sens = lib(sensitivities(&m.sys, &m.anchors, 1e-5))?;
        let mirror = |x: &[f64]| m.model.mirror(x);
        let varrho = lib(estimate_varrho(&m.sys, &m.anchors, &mirror, &regular, 1e-4))?;
        let esc = SimConfig { eps, dt: 1e-5, seed, n_samples: escape_samples, ..Default::default() };
        let inputs = PhaseInputs {
            regular: lib(regular_stats(&regular, eps))?,
            sliding: lib(sliding_stats(&m.sys, &m.anchors, eps, 1e-4))?,
            escape: lib(escape_surrogate(&m.sys, &m.anchors, &esc))?,
        };
        let p = predict(&inputs, &sens, varrho, false);
        *out = FstochPrediction {
            diff_half: p.diff_half,
            diff_osc: p.diff_osc,
            var_half: p.var_half,
            var_osc: p.var_osc,
            std_half: p.std_half,
            std_osc: p.std_osc,
            varrho: p.varrho,
            diff_terms: p.diff.terms,
            var_terms: p.var.terms,
        };
        Ok(())
    })
}
