//! Density of `du = s ds + dW` reflected at `u = 0`, started at `u → 0`, `s → −∞`:
//!
//! `p(u,s) = 2^{2/3} e^{−s³/6} e^{us} Y(u,s)`,
//! `Y = (2πi)⁻¹ ∫ Ai(2^{1/3}(u+ν)) / Ai(2^{1/3}ν)² e^{νs} dν` over a vertical line.
//!
//! Every pole of the integrand lies on the negative real axis, so any line `Re ν = c ≥ 0`
//! works. We take `c` at the real minimum of the log-integrand, which is the saddle point,
//! and integrate in log space; on the imaginary axis the integral suffers total
//! cancellation once `s` is a few units.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::airy::airy_scaled;
use crate::error::{Error, Result};
use crate::numerics::brent;

const K: f64 = 1.259_921_049_894_873_2; // 2^{1/3}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourOptions {
    /// Stop the tail once the integrand is below this fraction of its peak.
    pub tail: f64,
    /// Relative change between step halvings accepted as converged.
    pub rel_tol: f64,
    pub max_halvings: usize,
}

impl Default for ContourOptions {
    fn default() -> Self {
        Self { tail: 1e-15, rel_tol: 1e-11, max_halvings: 8 }
    }
}

/// One evaluation with its diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnesslValue {
    pub p: f64,
    /// Abscissa of the contour.
    pub c: f64,
    /// Extent `L` of the truncated contour, `|Im ν| ≤ L`.
    pub extent: f64,
    /// Relative change at the last step halving.
    pub error_estimate: f64,
}

/// `ln Ai(K(u+ν)) − 2 ln Ai(Kν) + νs`.
fn log_integrand(u: f64, s: f64, nu: Complex64) -> Complex64 {
    let num = airy_scaled((nu + u) * K).ln_ai();
    let den = airy_scaled(nu * K).ln_ai();
    num - den * 2.0 + nu * s
}

/// Derivative of the real log-integrand along the real axis.
fn dlog_real(u: f64, s: f64, c: f64) -> f64 {
    let a = airy_scaled(Complex64::new(K * (u + c), 0.0));
    let b = airy_scaled(Complex64::new(K * c, 0.0));
    K * (a.aip / a.ai).re - 2.0 * K * (b.aip / b.ai).re + s
}

fn saddle(u: f64, s: f64) -> Result<f64> {
    if dlog_real(u, s, 0.0) >= 0.0 {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    while dlog_real(u, s, hi) < 0.0 {
        hi *= 2.0;
        if hi > 1e8 {
            return Err(Error::Quadrature(format!("no saddle for u = {u}, s = {s}")));
        }
    }
    brent(|c| dlog_real(u, s, c), 0.0, hi, 1e-10)
}

/// `p^E(u, s)` with diagnostics.
pub fn knessl_eval(u: f64, s: f64, opts: &ContourOptions) -> Result<KnesslValue> {
    if !(u >= 0.0) || !s.is_finite() {
        return Err(Error::InvalidInput(format!("knessl_pdf needs u >= 0, finite s (u = {u}, s = {s})")));
    }
    let c = saddle(u, s)?;
    let base = log_integrand(u, s, Complex64::new(c, 0.0)).re;
    // width from the real-axis curvature; Re L(c+iy) ≈ L(c) − L''(c)y²/2
    let d = 1e-4 * (1.0 + c);
    let curv = (dlog_real(u, s, c + d) - dlog_real(u, s, (c - d).max(0.0))) / (c + d - (c - d).max(0.0));
    let width = if curv > 1e-8 { 1.0 / curv.sqrt() } else { 1.0 };
    let f = |y: f64| -> Complex64 { (log_integrand(u, s, Complex64::new(c, y)) - base).exp() };

    // trapezoid on [0, L], L grown until the tail is negligible
    let trap = |h: f64| -> (f64, f64) {
        let mut acc = 0.5 * f(0.0).re;
        let mut small = 0;
        let mut j = 1;
        loop {
            let y = j as f64 * h;
            let v = f(y);
            acc += v.re;
            small = if v.norm() < opts.tail { small + 1 } else { 0 };
            if (small >= 4 && y > 3.0 * width) || j > 2_000_000 {
                return (acc * h, y);
            }
            j += 1;
        }
    };
    let mut h = 0.5 * width.min(1.0 / (1.0 + s.abs()));
    let (mut prev, mut extent) = trap(h);
    let mut err = f64::INFINITY;
    for _ in 0..opts.max_halvings {
        h *= 0.5;
        let (cur, l) = trap(h);
        err = ((cur - prev) / cur).abs();
        prev = cur;
        extent = l;
        if err < opts.rel_tol {
            break;
        }
    }
    if !(err < 1e-6) {
        return Err(Error::Quadrature(format!("contour integral at u = {u}, s = {s}: relative change {err:e}")));
    }
    let y = prev / std::f64::consts::PI;
    let ln_p = (2.0f64 / 3.0) * 2f64.ln() - s.powi(3) / 6.0 + u * s + base;
    Ok(KnesslValue { p: ln_p.exp() * y, c, extent, error_estimate: err })
}

/// `p^E(u, s)` with default contour options.
pub fn knessl_pdf(u: f64, s: f64) -> Result<f64> {
    knessl_eval(u, s, &ContourOptions::default()).map(|v| v.p)
}

/// `p^E(·, s)` on a `u` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscapePdf {
    pub s: f64,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    /// Largest per-point relative quadrature change.
    pub error_estimate: f64,
}

pub fn knessl_table(s: f64, u: &[f64], opts: &ContourOptions) -> Result<EscapePdf> {
    let vals: Vec<KnesslValue> = u.iter().map(|&x| knessl_eval(x, s, opts)).collect::<Result<_>>()?;
    Ok(EscapePdf {
        s,
        u: u.to_vec(),
        p: vals.iter().map(|v| v.p).collect(),
        error_estimate: vals.iter().map(|v| v.error_estimate).fold(0.0, f64::max),
    })
}

/// Mass, mean and variance of `u` under `p^E(·, s)` by composite Gauss–Legendre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UMoments {
    pub mass: f64,
    pub mean: f64,
    pub var: f64,
}

/// Support `[lo, hi]` of `p^E(·, s)` outside which the mass is below about 1e-20:
/// the bulk sits at `s²/2 + 1` with variance close to `s` for large `s`.
pub fn u_range(s: f64) -> (f64, f64) {
    let sp = s.max(0.0);
    let centre = 0.5 * sp * sp + 1.0;
    let spread = 11.0 * (1.0 + sp).sqrt();
    ((centre - spread).max(0.0), centre + spread + 6.0 / (1.0 + (-s).max(0.0)))
}

pub fn u_moments(s: f64, opts: &ContourOptions, panels: usize) -> Result<UMoments> {
    let (x, w) = crate::numerics::gauss_legendre(12);
    let (lo, hi) = u_range(s);
    let h = (hi - lo) / panels as f64;
    let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for k in 0..panels {
        for (xi, wi) in x.iter().zip(&w) {
            let u = lo + (k as f64 + 0.5 * (xi + 1.0)) * h;
            let p = knessl_eval(u, s, opts)?.p * 0.5 * h * wi;
            m0 += p;
            m1 += p * u;
            m2 += p * u * u;
        }
    }
    let mean = m1 / m0;
    Ok(UMoments { mass: m0, mean, var: m2 / m0 - mean * mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_negative_u() {
        assert!(knessl_pdf(-0.1, 0.0).is_err());
    }

    #[test]
    fn early_times_approach_reflected_exponential() {
        // for s ≪ 0 the density relaxes to 2|s| e^{2su}
        let s = -3.0;
        for u in [0.0, 0.1, 0.3] {
            let p = knessl_pdf(u, s).unwrap();
            let q = 2.0 * s.abs() * (2.0 * s * u).exp();
            assert!((p - q).abs() / q < 0.1, "{u}: {p} vs {q}");
        }
    }

    #[test]
    fn mode_moves_right_with_s() {
        let argmax = |s: f64| {
            (0..200).map(|i| i as f64 * 0.025).fold((0.0, -1.0), |best, u| {
                let p = knessl_pdf(u, s).unwrap();
                if p > best.1 { (u, p) } else { best }
            })
        };
        assert_eq!(argmax(-1.0).0, 0.0);
        assert!(argmax(2.0).0 > 1.0);
    }
}

