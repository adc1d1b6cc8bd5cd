//! Stochastic averaging for noisy sliding motion and first passage to `x₂ = δ⁻`.
//!
//! Near the manifold `z = x₁/ε` is fast and relaxes to a two-sided exponential density.
//! Averaging the slow drift over it gives `Ω + αεΛ`; fluctuations of `y = (x₂,…,x_N)`
//! about the sliding solution follow the linear diffusion `dY = D_yΩ Y dt + M dW`.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filippov::{filippov_field, FilippovSde, SlidingCoeffs};
use crate::mc::replicate_rng;
use crate::numerics::{brent, rk4_step, simpson};

/// `eˣ² erfc(x)` for `x ≥ 0`.
fn erfcx(x: f64) -> f64 {
    if x < 20.0 {
        (x * x).exp() * statrs::function::erf::erfc(x)
    } else {
        let r = 1.0 / (2.0 * x * x);
        let series = 1.0 - r + 3.0 * r * r - 15.0 * r.powi(3) + 105.0 * r.powi(4) - 945.0 * r.powi(5);
        series / (x * std::f64::consts::PI.sqrt())
    }
}

/// Quasi-steady-state density of `z = x₁/ε` at frozen `y`, including the `O(ε)` curvature
/// terms in the exponent. Normalised exactly rather than by the truncated series.
#[derive(Debug, Clone, PartialEq)]
pub struct QssDensity {
    pub a_l: f64,
    pub a_r: f64,
    pub c_l: f64,
    pub c_r: f64,
    pub alpha: f64,
    pub eps: f64,
    norm: f64,
    /// Retained range `(z_min, z_max)`; infinite unless a curvature term makes the exponent turn.
    pub range: (f64, f64),
}

impl QssDensity {
    pub fn new(c: &SlidingCoeffs, alpha: f64, eps: f64) -> Result<Self> {
        if !c.in_stable_region() {
            return Err(Error::OutsideSlidingRegion { a_l: c.a_l, a_r: c.a_r });
        }
        if !(alpha > 0.0) || !(eps >= 0.0) {
            return Err(Error::InvalidInput("qss density needs alpha > 0, eps >= 0".into()));
        }
        let (il, sl) = Self::half_integral(c.a_l, c.c_l * eps, alpha);
        let (ir, sr) = Self::half_integral(c.a_r, c.c_r * eps, alpha);
        Ok(Self {
            a_l: c.a_l,
            a_r: c.a_r,
            c_l: c.c_l,
            c_r: c.c_r,
            alpha,
            eps,
            norm: 1.0 / (il + ir),
            range: (-sl, sr),
        })
    }

    /// `∫₀^{s*} exp((−2as + κs²)/α) ds` and its upper limit `s*`.
    fn half_integral(a: f64, kappa: f64, alpha: f64) -> (f64, f64) {
        if kappa == 0.0 {
            (alpha / (2.0 * a), f64::INFINITY)
        } else if kappa < 0.0 {
            let k = -kappa;
            let x = a / (alpha * k).sqrt();
            ((std::f64::consts::PI * alpha / (4.0 * k)).sqrt() * erfcx(x), f64::INFINITY)
        } else {
            // exponent turns at s* = a/κ; the density is cut there
            let s_max = a / kappa;
            // κs ≤ a keeps the exponent below −as/α, so the mass past 40α/a is under e^{-40}
            let top = s_max.min(40.0 * alpha / a);
            let v = simpson(|s| ((-2.0 * a * s + kappa * s * s) / alpha).exp(), 0.0, top, 20_000);
            (v, s_max)
        }
    }

    /// Truncated-series constant `2aLaR/(α(aL+aR)) − ε(aL³cR + aR³cL)/(aLaR(aL+aR)²)`.
    pub fn series_norm(&self) -> f64 {
        let (al, ar) = (self.a_l, self.a_r);
        2.0 * al * ar / (self.alpha * (al + ar))
            - self.eps * (al.powi(3) * self.c_r + ar.powi(3) * self.c_l) / (al * ar * (al + ar).powi(2))
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn pdf(&self, z: f64) -> f64 {
        if z < self.range.0 || z > self.range.1 {
            return 0.0;
        }
        let e = if z < 0.0 {
            (2.0 * self.a_l * z + self.c_l * self.eps * z * z) / self.alpha
        } else {
            -(2.0 * self.a_r * z - self.c_r * self.eps * z * z) / self.alpha
        };
        self.norm * e.exp()
    }

    /// Leading-order `E[z] = α(aL − aR)/(2aLaR)`.
    pub fn mean_z(&self) -> f64 {
        self.alpha * (self.a_l - self.a_r) / (2.0 * self.a_l * self.a_r)
    }

    /// Leading-order `Var z = α²(aL² + aR²)/(4aL²aR²)`.
    pub fn var_z(&self) -> f64 {
        let (al, ar) = (self.a_l, self.a_r);
        self.alpha.powi(2) * (al * al + ar * ar) / (4.0 * al * al * ar * ar)
    }
}

pub fn qss_density(c: &SlidingCoeffs, alpha: f64, eps: f64, z: f64) -> Result<f64> {
    Ok(QssDensity::new(c, alpha, eps)?.pdf(z))
}

/// Drift correction `Λ` with `E[F | y] = Ω + αεΛ + O(ε²)`.
pub fn lambda_correction(c: &SlidingCoeffs) -> Result<DVector<f64>> {
    let (al, ar) = (c.a_l, c.a_r);
    if al * ar == 0.0 {
        return Err(Error::OutsideSlidingRegion { a_l: al, a_r: ar });
    }
    let s = al + ar;
    let num = (&c.d_r * (al * al) - &c.d_l * (ar * ar)) * s - (&c.b_l - &c.b_r) * (al * al * c.c_r - ar * ar * c.c_l);
    Ok(num / (2.0 * al * ar * s * s))
}

/// `σσᵀ = (bL − bR)(bL − bR)ᵀ/(aL + aR)²`.
pub fn sigma_sigma_t(c: &SlidingCoeffs) -> DMatrix<f64> {
    let db = &c.b_l - &c.b_r;
    &db * db.transpose() / (c.a_l + c.a_r).powi(2)
}

/// `M(y) = [−(bL − bR)/(aL + aR) | I] D`.
pub fn m_matrix(sys: &FilippovSde, y: &[f64]) -> DMatrix<f64> {
    let c = sys.sliding_coeffs(y);
    let m = y.len();
    let mut left = DMatrix::zeros(m, m + 1);
    let col = -(&c.b_l - &c.b_r) / (c.a_l + c.a_r);
    left.set_column(0, &col);
    for i in 0..m {
        left[(i, i + 1)] = 1.0;
    }
    left * sys.diffusion()
}

/// Sliding solution with its `O(ε)` averaged correction, up to `e₁ᵀy = δ⁻`.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedPath {
    pub times: Vec<f64>,
    pub y_d: Vec<DVector<f64>>,
    /// `ȳ⁽¹⁾(t)`, solving `ẏ = D_yΩ ȳ + αΛ`, `ȳ(0) = 0`.
    pub ybar1: Vec<DVector<f64>>,
    pub t_ds: f64,
    pub y_ds: DVector<f64>,
    pub delta_minus: f64,
    pub step: f64,
    pub alpha: f64,
}

struct Sweep {
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
}

/// RK4 along the sliding solution carrying `[y, ȳ⁽¹⁾, vec Θ]`, stopped exactly at `y₁ = δ⁻`.
fn sweep(sys: &FilippovSde, y0: &[f64], delta_minus: f64, h: f64, horizon: f64) -> Result<Sweep> {
    let m = y0.len();
    let alpha = sys.dd_t()[(0, 0)];
    let rhs = |s: &[f64], out: &mut [f64]| -> Result<()> {
        let y = &s[..m];
        let c = sys.sliding_coeffs(y);
        let (omega, _) = filippov_field(&c)?;
        let jac = sys.sliding_jacobian(y)?;
        let lam = lambda_correction(&c)?;
        let yb = DVector::from_column_slice(&s[m..2 * m]);
        let th = DMatrix::from_column_slice(m, m, &s[2 * m..]);
        let mm = m_matrix(sys, y);
        let dyb = &jac * &yb + lam * alpha;
        let jt = &jac * &th;
        let dth = &jt + jt.transpose() + &mm * mm.transpose();
        out[..m].copy_from_slice(omega.as_slice());
        out[m..2 * m].copy_from_slice(dyb.as_slice());
        out[2 * m..].copy_from_slice(dth.as_slice());
        Ok(())
    };
    let step = |s: &[f64], h: f64| -> Result<Vec<f64>> {
        let mut err = None;
        let mut out = vec![0.0; s.len()];
        rk4_step(
            &mut |z: &[f64], d: &mut [f64]| {
                if let Err(e) = rhs(z, d) {
                    err.get_or_insert(e);
                    d.iter_mut().for_each(|v| *v = 0.0);
                }
            },
            s,
            h,
            &mut out,
        );
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    };
    let mut s = vec![0.0; 2 * m + m * m];
    s[..m].copy_from_slice(y0);
    if !sys.sliding_coeffs(y0).in_stable_region() {
        let c = sys.sliding_coeffs(y0);
        return Err(Error::OutsideSlidingRegion { a_l: c.a_l, a_r: c.a_r });
    }
    let g0 = y0[0] - delta_minus;
    let mut times = vec![0.0];
    let mut states = vec![s.clone()];
    let mut t = 0.0;
    while t < horizon {
        let next = step(&s, h).map_err(|_| boundary_error(t, &s[..m]))?;
        if !sys.sliding_coeffs(&next[..m]).in_stable_region() {
            return Err(boundary_error(t + h, &next[..m]));
        }
        let g = next[0] - delta_minus;
        if g == 0.0 || g.signum() != g0.signum() {
            let hs = brent(|hh| step(&s, hh).map(|v| v[0] - delta_minus).unwrap_or(f64::NAN), 0.0, h, 1e-15)?;
            let last = step(&s, hs)?;
            times.push(t + hs);
            states.push(last);
            return Ok(Sweep { times, states });
        }
        s = next;
        t += h;
        times.push(t);
        states.push(s.clone());
    }
    Err(Error::NoPassage { horizon })
}

fn boundary_error(t: f64, y: &[f64]) -> Error {
    let mut point = vec![0.0];
    point.extend_from_slice(y);
    Error::SlidingBoundaryReached { time: t, point }
}

/// Integrates the sliding solution from `y0` to `e₁ᵀy = δ⁻` with RK4 step `h`.
pub fn averaged_path(sys: &FilippovSde, y0: &[f64], delta_minus: f64, h: f64) -> Result<AveragedPath> {
    let m = y0.len();
    let sw = sweep(sys, y0, delta_minus, h, 1e3)?;
    let y_d: Vec<DVector<f64>> = sw.states.iter().map(|s| DVector::from_column_slice(&s[..m])).collect();
    let ybar1 = sw.states.iter().map(|s| DVector::from_column_slice(&s[m..2 * m])).collect();
    Ok(AveragedPath {
        t_ds: *sw.times.last().unwrap(),
        y_ds: y_d.last().unwrap().clone(),
        times: sw.times,
        y_d,
        ybar1,
        delta_minus,
        step: h,
        alpha: sys.dd_t()[(0, 0)],
    })
}

/// `O(ε)` passage means from the averaged equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidingMeans {
    pub t: f64,
    pub y: DVector<f64>,
    pub x1: f64,
    /// Coefficients of `ε`: `t^{S,1}`, `y^{S,1}`, `E[x₁^S]/ε`.
    pub t1: f64,
    pub y1: DVector<f64>,
    pub x1_coeff: f64,
}

pub fn averaged_passage_means(sys: &FilippovSde, path: &AveragedPath, eps: f64) -> Result<SlidingMeans> {
    let c = sys.sliding_coeffs(path.y_ds.as_slice());
    let (omega, _) = filippov_field(&c)?;
    if omega[0].abs() < 1e-10 {
        return Err(Error::TangentialPassage);
    }
    let yb = path.ybar1.last().unwrap();
    let t1 = -yb[0] / omega[0];
    let y1 = &omega * t1 + yb;
    let x1_coeff = path.alpha * (c.a_l - c.a_r) / (2.0 * c.a_l * c.a_r);
    Ok(SlidingMeans {
        t: path.t_ds + eps * t1,
        y: &path.y_ds + &y1 * eps,
        x1: eps * x1_coeff,
        t1,
        y1,
        x1_coeff,
    })
}

/// Linear-diffusion data along a sliding path.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidingDiffusion {
    pub times: Vec<f64>,
    pub theta: Vec<DMatrix<f64>>,
    /// `M(y_dS)` and derived products at the passage point.
    pub m_ds: DMatrix<f64>,
    pub mmt_ds: DMatrix<f64>,
    pub sigma_sigma_t_ds: DMatrix<f64>,
    /// Noise correlated between `x₁` and `y` (β ≠ 0): the linear diffusion is conjectural there.
    pub correlated_noise: bool,
}

pub fn diffusion_matrices(sys: &FilippovSde, path: &AveragedPath) -> Result<SlidingDiffusion> {
    let m = path.y_ds.len();
    let sw = sweep(sys, path.y_d[0].as_slice(), path.delta_minus, path.step, 1e3)?;
    let theta = sw.states.iter().map(|s| DMatrix::from_column_slice(m, m, &s[2 * m..])).collect();
    let c = sys.sliding_coeffs(path.y_ds.as_slice());
    let m_ds = m_matrix(sys, path.y_ds.as_slice());
    Ok(SlidingDiffusion {
        times: sw.times,
        theta,
        mmt_ds: &m_ds * m_ds.transpose(),
        m_ds,
        sigma_sigma_t_ds: sigma_sigma_t(&c),
        correlated_noise: sys.noise_partition().beta.amax() > 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidingVarCov {
    pub var_t: f64,
    pub cov_y: DMatrix<f64>,
    pub var_x1: f64,
}

/// Leading-order spreads at passage. The time variance divides `θ₁₁` by `(e₁ᵀΩ)²`.
pub fn passage_var_cov_sliding(
    sys: &FilippovSde,
    diff: &SlidingDiffusion,
    path: &AveragedPath,
    eps: f64,
) -> Result<SlidingVarCov> {
    let c = sys.sliding_coeffs(path.y_ds.as_slice());
    let (omega, _) = filippov_field(&c)?;
    let o1 = omega[0];
    if o1.abs() < 1e-10 {
        return Err(Error::TangentialPassage);
    }
    let m = omega.len();
    let th = diff.theta.last().unwrap();
    let mut p = DMatrix::identity(m, m);
    for i in 0..m {
        p[(i, 0)] -= omega[i] / o1;
    }
    let mut cov_y = &p * th * p.transpose() * eps;
    for i in 0..m {
        cov_y[(0, i)] = 0.0;
        cov_y[(i, 0)] = 0.0;
    }
    let (al, ar) = (c.a_l, c.a_r);
    Ok(SlidingVarCov {
        var_t: eps * th[(0, 0)] / (o1 * o1),
        cov_y,
        var_x1: (path.alpha * eps).powi(2) * (al * al + ar * ar) / (4.0 * al * al * ar * ar),
    })
}

/// Distance of the path to the sliding boundary against its `ε`-scale spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMargin {
    /// Smallest `min(aL, aR)/|∇_y a|` along the path.
    pub distance: f64,
    /// Spread `√(ε tr Θ) + ε|ȳ⁽¹⁾|` at the closest point.
    pub spread: f64,
    pub warn: bool,
}

pub fn boundary_margin(sys: &FilippovSde, path: &AveragedPath, diff: &SlidingDiffusion, eps: f64) -> BoundaryMargin {
    let n = sys.dim();
    let mut best = (f64::INFINITY, 0.0);
    for (i, y) in path.y_d.iter().enumerate() {
        let c = sys.sliding_coeffs(y.as_slice());
        let x = {
            let mut v = vec![0.0];
            v.extend(y.iter());
            v
        };
        let (a, side) = if c.a_l < c.a_r {
            (c.a_l, crate::filippov::Side::Left)
        } else {
            (c.a_r, crate::filippov::Side::Right)
        };
        let j = sys.jacobian(side, &x);
        let grad = (1..n).map(|k| j[(0, k)].powi(2)).sum::<f64>().sqrt();
        let dist = if grad > 0.0 { a / grad } else { f64::INFINITY };
        if dist < best.0 {
            let th = diff.theta.get(i).map(|t| t.trace()).unwrap_or(0.0);
            best = (dist, (eps * th.max(0.0)).sqrt() + eps * path.ybar1[i].norm());
        }
    }
    BoundaryMargin { distance: best.0, spread: best.1, warn: best.0 < 5.0 * best.1 }
}

/// Monte-Carlo estimate of `σσᵀα` from the two-valued-drift fast process at frozen `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaOracle {
    pub estimate: DMatrix<f64>,
    /// Summation window in fast time.
    pub window: f64,
    pub converged: bool,
}

/// Simulates `dz = (aL·[z<0] − aR·[z>0]) dr + √α dW` for `n_steps` Euler steps and sums the
/// empirical autocovariance of `F₀(z) − Ω = −(bL − bR)/2 · (sgn z − E sgn z)`.
///
/// The autocovariance decays like `exp(−a_min² r/(2α))`, so the lag sum runs over the fixed
/// window `W = 12α/a_min²`. The sign series is block-averaged to `W/50` before summing, which
/// leaves the integrated autocovariance unchanged.
pub fn sigma_mc_oracle(c: &SlidingCoeffs, alpha: f64, n_steps: u64, seed: u64) -> Result<SigmaOracle> {
    if !c.in_stable_region() {
        return Err(Error::OutsideSlidingRegion { a_l: c.a_l, a_r: c.a_r });
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput("sigma oracle needs alpha > 0".into()));
    }
    let db = &c.b_l - &c.b_r;
    let m = db.len();
    if db.amax() == 0.0 {
        return Ok(SigmaOracle { estimate: DMatrix::zeros(m, m), window: 0.0, converged: true });
    }
    const LAGS: usize = 50;
    let a_max = c.a_l.max(c.a_r);
    let a_min = c.a_l.min(c.a_r);
    let window = ORACLE_WINDOW * alpha / (a_min * a_min);
    let h = (ORACLE_STEP * alpha / (a_max * a_max)).min(window / LAGS as f64);
    let block = (window / (LAGS as f64 * h)).round().max(1.0) as u64;
    let n_blocks = (n_steps / block) as usize;
    if n_blocks < 100 * LAGS {
        return Err(Error::InvalidInput(format!(
            "sigma oracle needs at least {} steps for these coefficients",
            100 * LAGS as u64 * block
        )));
    }
    let mut rng = replicate_rng(seed, 0);
    let sq = (alpha * h).sqrt();
    let (up, down) = (c.a_l * h, -c.a_r * h);
    let mut z = 0.0f64;
    let mut means = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let mut acc = 0i64;
        for _ in 0..block {
            let xi: f64 = StandardNormal.sample(&mut rng);
            z += if z < 0.0 { up } else { down } + sq * xi;
            acc += if z > 0.0 { 1 } else { -1 };
        }
        means.push(acc as f64 / block as f64);
    }
    let mu = means.iter().sum::<f64>() / n_blocks as f64;
    means.iter_mut().for_each(|v| *v -= mu);
    let autocov = |k: usize| -> f64 {
        means[..n_blocks - k].iter().zip(&means[k..]).map(|(a, b)| a * b).sum::<f64>() / n_blocks as f64
    };
    let r0 = autocov(0);
    let mut sum = r0;
    let mut last = r0;
    for lag in 1..=LAGS {
        last = autocov(lag);
        sum += 2.0 * last;
    }
    // long-run variance of sgn z, times (bL − bR)(bL − bR)ᵀ/4
    let s_int = sum * block as f64 * h;
    Ok(SigmaOracle {
        estimate: &db * db.transpose() * (s_int / 4.0),
        window: LAGS as f64 * block as f64 * h,
        converged: last.abs() < 1e-2 * r0,
    })
}

const ORACLE_WINDOW: f64 = 12.0;
/// Euler step in units of `α/a_max²`; the sign statistics move by under 1% up to 0.2.
const ORACLE_STEP: f64 = 5e-2;

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(a: f64, c: f64) -> SlidingCoeffs {
        SlidingCoeffs {
            a_l: a,
            a_r: a,
            b_l: DVector::from_vec(vec![1.0, 0.0]),
            b_r: DVector::from_vec(vec![-1.0, 0.0]),
            c_l: c,
            c_r: c,
            d_l: DVector::from_vec(vec![0.3, -0.2]),
            d_r: DVector::from_vec(vec![0.3, -0.2]),
        }
    }

    #[test]
    fn symmetric_double_exponential() {
        let q = QssDensity::new(&sym(1.0, 0.0), 1.0, 0.0).unwrap();
        for z in [-1.0, -0.2, 0.3, 2.0] {
            assert!((q.pdf(z) - (-2.0 * f64::abs(z)).exp()).abs() < 1e-14);
        }
        assert_eq!(q.mean_z(), 0.0);
    }

    #[test]
    fn exact_norm_matches_series_to_first_order() {
        let c = SlidingCoeffs { a_l: 1.9, a_r: 0.1, c_l: -5.0, c_r: -5.0, ..sym(1.0, 0.0) };
        let gap = |eps: f64| {
            let q = QssDensity::new(&c, 1.0, eps).unwrap();
            (q.norm() - q.series_norm()).abs()
        };
        // truncation error of the series is second order
        let ratio = gap(1e-5) / gap(5e-6);
        assert!((ratio - 4.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn growing_exponent_is_truncated() {
        let q = QssDensity::new(&sym(1.0, 2.0), 1.0, 1e-2).unwrap();
        assert!((q.range.1 - 50.0).abs() < 1e-12);
        assert_eq!(q.pdf(60.0), 0.0);
    }

    #[test]
    fn lambda_vanishes_when_symmetric() {
        assert_eq!(lambda_correction(&sym(1.3, -2.0)).unwrap().amax(), 0.0);
    }

    #[test]
    fn lambda_singular_at_boundary() {
        let c = SlidingCoeffs { a_l: 0.0, ..sym(1.0, 0.0) };
        assert!(lambda_correction(&c).is_err());
    }

    #[test]
    fn sigma_zero_when_b_equal() {
        let mut c = sym(1.0, 0.0);
        c.b_r = c.b_l.clone();
        assert_eq!(sigma_sigma_t(&c).amax(), 0.0);
        assert_eq!(sigma_mc_oracle(&c, 1.0, 10, 1).unwrap().estimate.amax(), 0.0);
    }

    #[test]
    fn sigma_oracle_symmetric_unit_case() {
        // aL = aR = 1, bL − bR = (2, 0): the (1,1) entry is 1
        let o = sigma_mc_oracle(&sym(1.0, 0.0), 1.0, 10_000_000, 3).unwrap();
        assert!((o.estimate[(0, 0)] - 1.0).abs() < 0.05, "{}", o.estimate);
        assert!(o.converged);
    }

    #[test]
    fn sigma_oracle_rejects_short_runs() {
        assert!(sigma_mc_oracle(&sym(1.0, 0.0), 1.0, 1000, 3).is_err());
    }

    #[test]
    fn erfcx_is_continuous_at_switch() {
        let a = (400.0f64).exp() * statrs::function::erf::erfc(20.0);
        let r: f64 = 1.0 / 800.0;
        let b = (1.0 - r + 3.0 * r * r - 15.0 * r.powi(3) + 105.0 * r.powi(4)) / (20.0 * std::f64::consts::PI.sqrt());
        assert!((a - b).abs() / b < 1e-9);
        assert!((erfcx(0.0) - 1.0).abs() < 1e-15);
    }
}
