//! Escape from the switching manifold near the end of the sliding region.
//!
//! Near the escape point `x = 0` the fast coordinate lives on `ε^{2/3}` and the slow ones on
//! `ε^{1/3}`. After the further rescaling below, `x₁` reduces to `du = s ds + dW` reflected
//! at `u = 0`, whose density for an early start is [`knessl_pdf`].

mod airy;
mod knessl;

pub use airy::{airy_ai, airy_aip, airy_scaled, AiryScaled};
pub use knessl::{
    knessl_eval, knessl_pdf, knessl_table, u_moments, u_range, ContourOptions, EscapePdf, KnesslValue, UMoments,
};

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filippov::FilippovSde;
use crate::mc::replicate_rng;

/// Local coefficients at the escape point and the maps into `(u, s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscapeScaling {
    /// `∂a_R/∂x₂(0)`, negative.
    pub dadx2: f64,
    pub b_r1: f64,
    pub a_l: f64,
    pub alpha: f64,
    /// `u = u_factor · x₁ / ε^{2/3}`.
    pub u_factor: f64,
    /// `s = s_factor · (t − t₀) / ε^{1/3}`, `t₀` the time of `x₂ = 0`.
    pub s_factor: f64,
    /// `(λ₁, λ₂, λ₃)`: powers of `ε` scaling `x₁`, the other coordinates and time.
    pub exponents: (f64, f64, f64),
}

impl EscapeScaling {
    pub fn u_of_x1(&self, x1: f64, eps: f64) -> f64 {
        self.u_factor * x1 / eps.powf(2.0 / 3.0)
    }

    pub fn x1_of_u(&self, u: f64, eps: f64) -> f64 {
        u * eps.powf(2.0 / 3.0) / self.u_factor
    }

    pub fn s_of_time(&self, t_minus_t0: f64, eps: f64) -> f64 {
        self.s_factor * t_minus_t0 / eps.cbrt()
    }

    /// `s` reached at level `x₂` of the limiting motion `ẋ₂ = b_{R1}`.
    pub fn s_of_x2(&self, x2: f64, eps: f64) -> f64 {
        self.s_of_time(x2 / self.b_r1, eps)
    }
}

/// Coefficients at `y = 0`; `∂a_R/∂x₂` by central difference of the sliding coefficients.
pub fn escape_scaling(sys: &FilippovSde) -> Result<EscapeScaling> {
    let m = sys.dim() - 1;
    let y0 = vec![0.0; m];
    let c0 = sys.sliding_coeffs(&y0);
    let h = 1e-6;
    let mut yp = y0.clone();
    let mut ym = y0.clone();
    yp[0] = h;
    ym[0] = -h;
    let dadx2 = (sys.sliding_coeffs(&yp).a_r - sys.sliding_coeffs(&ym).a_r) / (2.0 * h);
    let b_r1 = c0.b_r[0];
    let alpha = sys.dd_t()[(0, 0)];
    if !(c0.a_l > 0.0) {
        return Err(Error::NotEscapePoint(format!("aL(0) = {} must be positive", c0.a_l)));
    }
    if !(dadx2 < 0.0) {
        return Err(Error::NotEscapePoint(format!("daR/dx2(0) = {dadx2} must be negative")));
    }
    if !(b_r1 > 0.0) {
        return Err(Error::NotEscapePoint(format!("bR1(0) = {b_r1} must be positive")));
    }
    if !(alpha > 0.0) {
        return Err(Error::NotEscapePoint("no noise normal to the manifold".into()));
    }
    if c0.a_r.abs() > 1e-8 * (1.0 + c0.a_l.abs()) {
        return Err(Error::NotEscapePoint(format!("aR(0) = {} is not zero", c0.a_r)));
    }
    // x₁ = k·u, t − t₀ = m·s with k = |∂a|b m² = √(α m)
    let g = dadx2.abs() * b_r1;
    let m_t = alpha.cbrt() / g.powf(2.0 / 3.0);
    let k = (alpha * m_t).sqrt();
    Ok(EscapeScaling {
        dadx2,
        b_r1,
        a_l: c0.a_l,
        alpha,
        u_factor: 1.0 / k,
        s_factor: 1.0 / m_t,
        exponents: (2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0),
    })
}

/// Theory for `x₁` at the level `x₂ = δ⁺`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscapeX1Stats {
    pub eps: f64,
    pub s: f64,
    pub mean_u: f64,
    pub var_u: f64,
    /// `E[x₁] − x₁_det`, the deterministic reference being the limiting path `u = max(s, 0)²/2`.
    pub diff: f64,
    pub std: f64,
}

pub fn escape_x1_stats(scaling: &EscapeScaling, eps: f64, delta_plus: f64, opts: &ContourOptions) -> Result<EscapeX1Stats> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    let s = scaling.s_of_x2(delta_plus, eps);
    let m = u_moments(s, opts, 24)?;
    let u_det = 0.5 * s.max(0.0).powi(2);
    let scale = scaling.x1_of_u(1.0, eps);
    Ok(EscapeX1Stats { eps, s, mean_u: m.mean, var_u: m.var, diff: scale * (m.mean - u_det), std: scale * m.var.sqrt() })
}

/// Samples of `u(s)` at each requested `s` for `du = s ds + dW` reflected by folding at 0.
///
/// Paths start at `s₀` in the local equilibrium `2|s₀| e^{2 s₀ u}`, which is the
/// `s₀ → −∞, u₀ → 0` limit up to `O(1/|s₀|³)`. `targets` must be increasing and above `s0`.
pub fn reflected_escape_samples(s0: f64, targets: &[f64], ds: f64, n_paths: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(s0 < 0.0) || !(ds > 0.0) || targets.is_empty() || targets[0] <= s0 || targets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("need s0 < 0 < ds and increasing targets above s0".into()));
    }
    let start = Exp::new(-2.0 * s0).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let per_path: Vec<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = replicate_rng(seed, k);
            let mut u: f64 = start.sample(&mut rng);
            let mut s = s0;
            let mut out = Vec::with_capacity(targets.len());
            for &target in targets {
                let steps = ((target - s) / ds).round() as usize;
                let h = (target - s) / steps.max(1) as f64;
                let sh = h.sqrt();
                for _ in 0..steps.max(1) {
                    let z: f64 = rng.sample(StandardNormal);
                    // ∫ s ds over the step, exact
                    u = (u + (s + 0.5 * h) * h + sh * z).abs();
                    s += h;
                }
                s = target;
                out.push(u);
            }
            out
        })
        .collect();
    Ok((0..targets.len()).map(|j| per_path.iter().map(|p| p[j]).collect()).collect())
}

/// `∫|p − p̂|` against a histogram of `samples` with bin width `bin` on `[0, top]`.
pub fn l1_to_histogram(samples: &[f64], bin: f64, top: f64, pdf: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    let nb = (top / bin).ceil() as usize;
    let mut counts = vec![0usize; nb];
    let mut outside = 0usize;
    for &x in samples {
        let j = (x / bin) as usize;
        if j < nb {
            counts[j] += 1;
        } else {
            outside += 1;
        }
    }
    let n = samples.len() as f64;
    let (gx, gw) = crate::numerics::gauss_legendre(6);
    let mut l1 = outside as f64 / n;
    for (j, &c) in counts.iter().enumerate() {
        let a = j as f64 * bin;
        let mut mass = 0.0;
        for (x, w) in gx.iter().zip(&gw) {
            mass += pdf(a + 0.5 * bin * (x + 1.0))? * 0.5 * bin * w;
        }
        l1 += (mass - c as f64 / n).abs();
    }
    Ok(l1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filippov::{build_relay_model, NoiseSpec, RelayParams};

    fn relay() -> FilippovSde {
        let (m, _) = build_relay_model(RelayParams::default(), -0.1, 0.2).unwrap();
        m.system(&NoiseSpec::B).unwrap()
    }

    #[test]
    fn relay_coefficients() {
        let (m, _) = build_relay_model(RelayParams::default(), -0.1, 0.2).unwrap();
        let sc = escape_scaling(&m.system(&NoiseSpec::B).unwrap()).unwrap();
        assert!((sc.a_l - 2.0).abs() < 1e-9);
        assert!((sc.b_r1 - (m.z + 2.0)).abs() < 1e-9);
        assert!((sc.dadx2 + 1.0).abs() < 1e-8);
        assert_eq!(sc.exponents, (2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0));
    }

    #[test]
    fn scaling_reduces_to_unit_sde() {
        // x₁ = k u, t − t₀ = m s: drift |∂a| b_{R1} m² s and noise √(α m) must both equal k
        let sc = EscapeScaling { dadx2: -0.7, b_r1: 3.0, a_l: 1.0, alpha: 2.5, u_factor: 0.0, s_factor: 0.0, exponents: (0.0, 0.0, 0.0) };
        let g: f64 = 0.7 * 3.0;
        let m_t = sc.alpha.cbrt() / g.powf(2.0 / 3.0);
        let k = (sc.alpha * m_t).sqrt();
        assert!((g * m_t * m_t - k).abs() < 1e-14);
    }

    #[test]
    fn non_escape_point_rejected() {
        let sys = relay();
        let flipped = sys.with_diffusion(nalgebra::DMatrix::zeros(3, 3)).unwrap();
        assert!(matches!(escape_scaling(&flipped), Err(Error::NotEscapePoint(_))));
    }

    #[test]
    fn x1_stats_vanish_with_eps() {
        let sc = escape_scaling(&relay()).unwrap();
        let a = escape_x1_stats(&sc, 1e-3, 0.2, &ContourOptions::default()).unwrap();
        let b = escape_x1_stats(&sc, 1e-5, 0.2, &ContourOptions::default()).unwrap();
        assert!(b.diff.abs() < a.diff.abs() && b.std < a.std);
    }

    #[test]
    fn reflected_samples_are_nonnegative_and_reproducible() {
        let a = reflected_escape_samples(-3.0, &[-1.0, 0.0], 1e-2, 200, 5).unwrap();
        let b = reflected_escape_samples(-3.0, &[-1.0, 0.0], 1e-2, 200, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|&u| u >= 0.0));
    }
}
