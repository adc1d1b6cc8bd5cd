//! Complex Airy function `Ai` and its derivative.
//!
//! Three routes, chosen by `|z|` and half-plane:
//! Maclaurin series near the origin, the exponentially damped integral
//! `Ai(z) = e^{−ζ}/π ∫₀^∞ exp(−z^{1/2}t²) cos(t³/3) dt` in the right half-plane at
//! moderate `|z|`, and the large-`|z|` asymptotic expansion. Values are available scaled
//! by `e^{ζ}`, `ζ = (2/3)z^{3/2}`, so products and ratios can be formed in log space.

use num_complex::Complex64;
use std::sync::OnceLock;

use crate::numerics::gauss_legendre;

/// `Ai(0)`.
pub const AI0: f64 = 0.355_028_053_887_817_239;
/// `−Ai′(0)`.
pub const AIP0_NEG: f64 = 0.258_819_403_792_806_798;

const SERIES_RADIUS: f64 = 1.5;
const ASYMPTOTIC_RADIUS: f64 = 8.0;

/// `Ai e^{ζ}`, `Ai′ e^{ζ}` and `ζ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AiryScaled {
    pub ai: Complex64,
    pub aip: Complex64,
    pub zeta: Complex64,
    /// Relative accuracy 1e-10 not guaranteed: cancellation in the series or the
    /// connection formula (near zeros on the negative axis).
    pub degraded: bool,
}

impl AiryScaled {
    pub fn ai(&self) -> Complex64 {
        self.ai * (-self.zeta).exp()
    }

    pub fn aip(&self) -> Complex64 {
        self.aip * (-self.zeta).exp()
    }

    /// `ln Ai(z)`, on some branch; only its real part and differences are meaningful.
    pub fn ln_ai(&self) -> Complex64 {
        self.ai.ln() - self.zeta
    }
}

fn zeta(z: Complex64) -> Complex64 {
    z.powf(1.5) * (2.0 / 3.0)
}

/// `(Ai, Ai′)` by Maclaurin series.
fn series(z: Complex64) -> (Complex64, Complex64) {
    let z3 = z * z * z;
    let one = Complex64::new(1.0, 0.0);
    let (mut f, mut g) = (one, z);
    let (mut fp, mut gp) = (Complex64::new(0.0, 0.0), one);
    let (mut a, mut b) = (one, z);
    let (mut d, mut e) = (z * z * 0.5, one);
    fp += d;
    for k in 1..200 {
        let kf = k as f64;
        a *= z3 / ((3.0 * kf - 1.0) * 3.0 * kf);
        b *= z3 / (3.0 * kf * (3.0 * kf + 1.0));
        e *= z3 / (3.0 * kf * (3.0 * kf - 2.0));
        f += a;
        g += b;
        gp += e;
        if k >= 2 {
            d *= z3 / ((3.0 * kf - 1.0) * (3.0 * kf - 3.0));
            fp += d;
        }
        let scale = f.norm() + g.norm() + 1e-300;
        if a.norm() + b.norm() + d.norm() + e.norm() < 1e-18 * scale {
            break;
        }
    }
    (f * AI0 - g * AIP0_NEG, fp * AI0 - gp * AIP0_NEG)
}

/// Scaled `(Ai, Ai′)` from the large-argument expansion, valid for `|arg z| < π`.
fn asymptotic(z: Complex64) -> (Complex64, Complex64) {
    let zt = zeta(z);
    let inv = zt.inv();
    let (mut su, mut sv) = (Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0));
    let mut u = 1.0f64;
    let mut p = Complex64::new(1.0, 0.0);
    let mut last = f64::INFINITY;
    for k in 1..60 {
        let kf = k as f64;
        u *= (6.0 * kf - 5.0) * (6.0 * kf - 3.0) * (6.0 * kf - 1.0) / ((2.0 * kf - 1.0) * 216.0 * kf);
        let v = -(6.0 * kf + 1.0) / (6.0 * kf - 1.0) * u;
        p *= -inv;
        let tu = p * u;
        let mag = tu.norm();
        if mag > last {
            break;
        }
        su += tu;
        sv += p * v;
        last = mag;
        if mag < 1e-17 {
            break;
        }
    }
    let c = 0.5 / std::f64::consts::PI.sqrt();
    let q = z.powf(0.25);
    (su * c / q, -sv * c * q)
}

struct Rule {
    x: Vec<f64>,
    w: Vec<f64>,
}

fn rule() -> &'static Rule {
    static R: OnceLock<Rule> = OnceLock::new();
    R.get_or_init(|| {
        let (x, w) = gauss_legendre(16);
        Rule { x, w }
    })
}

/// Scaled `(Ai, Ai′)` by the damped integral, for `Re z ≥ 0`.
fn integral(z: Complex64) -> (Complex64, Complex64) {
    let sz = z.sqrt();
    // e^{−Re√z·T²} < 1e-18
    let t_max = (42.0 / sz.re).sqrt();
    let panels = 32;
    let h = t_max / panels as f64;
    let r = rule();
    let mut i0 = Complex64::new(0.0, 0.0);
    let mut i2 = Complex64::new(0.0, 0.0);
    for p in 0..panels {
        let a = p as f64 * h;
        for (x, w) in r.x.iter().zip(&r.w) {
            let t = a + 0.5 * h * (x + 1.0);
            let t2 = t * t;
            let f = (-sz * t2).exp() * (t2 * t / 3.0).cos() * (0.5 * h * w);
            i0 += f;
            i2 += f * t2;
        }
    }
    let pi = std::f64::consts::PI;
    (i0 / pi, (-sz * i0 - i2 / (sz * 2.0)) / pi)
}

/// Scaled Airy pair with method selection.
pub fn airy_scaled(z: Complex64) -> AiryScaled {
    let r = z.norm();
    let zt = zeta(z);
    if r <= SERIES_RADIUS {
        let (a, ap) = series(z);
        let e = zt.exp();
        return AiryScaled { ai: a * e, aip: ap * e, zeta: zt, degraded: false };
    }
    if z.re >= 0.0 {
        let (a, ap) = if r < ASYMPTOTIC_RADIUS { integral(z) } else { asymptotic(z) };
        return AiryScaled { ai: a, aip: ap, zeta: zt, degraded: false };
    }
    if r < ASYMPTOTIC_RADIUS {
        // series loses about e^{(2/3)|z|^{3/2}} to cancellation here
        let (a, ap) = series(z);
        let e = zt.exp();
        return AiryScaled { ai: a * e, aip: ap * e, zeta: zt, degraded: r > 6.0 };
    }
    // Ai(z) = −ωAi(ωz) − ω²Ai(ω²z), both rotated arguments inside |arg| < π
    let w = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI / 3.0);
    let w2 = w * w;
    let mut ai = Complex64::new(0.0, 0.0);
    let mut aip = Complex64::new(0.0, 0.0);
    let mut mag = 0.0;
    for (c, rot) in [(-w, w), (-w2, w2)] {
        let zr = z * rot;
        let (a, ap) = asymptotic(zr);
        let e = (-zeta(zr)).exp();
        ai += c * a * e;
        aip += c * rot * ap * e;
        mag += (a * e).norm();
    }
    let e = zt.exp();
    AiryScaled { ai: ai * e, aip: aip * e, zeta: zt, degraded: ai.norm() < 1e-3 * mag }
}

pub fn airy_ai(z: Complex64) -> Complex64 {
    airy_scaled(z).ai()
}

pub fn airy_aip(z: Complex64) -> Complex64 {
    airy_scaled(z).aip()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn rel(a: Complex64, b: Complex64) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn values_at_origin() {
        let g23 = statrs::function::gamma::gamma(2.0 / 3.0);
        let g13 = statrs::function::gamma::gamma(1.0 / 3.0);
        assert!((airy_ai(c(0.0, 0.0)).re - 3f64.powf(-2.0 / 3.0) / g23).abs() < 1e-15);
        assert!((airy_aip(c(0.0, 0.0)).re + 3f64.powf(-1.0 / 3.0) / g13).abs() < 1e-15);
        assert!((AI0 - 0.3550280539).abs() < 1e-10);
    }

    #[test]
    fn reference_values() {
        assert!((airy_ai(c(1.0, 0.0)).re - 0.135_292_416_312_881_4).abs() < 1e-14);
        assert!((airy_ai(c(5.0, 0.0)).re - 1.083_444_281_360_744e-4).abs() < 1e-14);
        assert!((airy_ai(c(-5.0, 0.0)).re - 0.350_761_009_024_114_2).abs() < 1e-12);
        assert!(rel(airy_ai(c(10.0, 0.0)), c(1.104_753_255_289_869e-10, 0.0)) < 1e-10);
    }

    #[test]
    fn routes_agree_at_switch_radii() {
        for k in 0..12 {
            let th = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 11.0;
            let z = Complex64::from_polar(SERIES_RADIUS, th);
            let (s, sp) = series(z);
            let e = zeta(z).exp();
            let (i, ip) = integral(z);
            assert!(rel(s * e, i) < 1e-11, "{z}");
            assert!(rel(sp * e, ip) < 1e-11, "{z}");
            let z = Complex64::from_polar(ASYMPTOTIC_RADIUS, th);
            let (i, ip) = integral(z);
            let (a, ap) = asymptotic(z);
            assert!(rel(i, a) < 1e-11, "{z}");
            assert!(rel(ip, ap) < 1e-11, "{z}");
        }
    }

    #[test]
    fn satisfies_airy_equation() {
        for z in [c(0.7, 0.3), c(3.0, 2.0), c(0.5, 6.0), c(12.0, -4.0), c(-9.0, 1.0)] {
            let h = 1e-3;
            let d2 = (airy_ai(z + h) - airy_ai(z) * 2.0 + airy_ai(z - h)) / (h * h);
            let scale = airy_ai(z).norm() * z.norm();
            assert!((d2 - z * airy_ai(z)).norm() < 1e-5 * scale, "{z}");
            let d1 = (airy_ai(z + h) - airy_ai(z - h)) / (2.0 * h);
            assert!(rel(d1, airy_aip(z)) < 1e-5, "{z}");
        }
    }

    #[test]
    fn large_arguments_stay_finite_when_scaled() {
        let a = airy_scaled(c(400.0, 30.0));
        assert!(!a.degraded && a.ai.is_finite() && a.ln_ai().re < -5000.0);
        assert!(!airy_scaled(c(20.0, 5.0)).degraded);
        // first zero of Ai on the negative axis
        assert!(airy_scaled(c(-2.338_107_410_459_767, 0.0)).ai.norm() < 1e-12);
        assert!(airy_scaled(c(-9.022_650_853_340_98, 0.0)).degraded);
    }
}
