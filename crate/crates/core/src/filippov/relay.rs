//! Relay feedback control model and its normal-form coordinates.
//!
//! In original coordinates `dX = (AX − B·sgn X₁) dt + √ε B dW`. The affine map
//! `x = PX + Q` moves the end of the upper sliding segment to the origin so that the
//! escape point sits at `x = 0` with the right branch tangent to the manifold there.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::field::{AffineField, FilippovSde, Side};
use super::integrate::{integrate_deterministic, IntegrateOptions, StopEvent};
use crate::error::{Error, Result};
use crate::numerics::brent;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelayParams {
    pub zeta: f64,
    pub lambda: f64,
    pub omega: f64,
}

impl Default for RelayParams {
    fn default() -> Self {
        Self { zeta: 0.5, lambda: 0.05, omega: 5.0 }
    }
}

/// Diffusion selection for the transformed relay system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NoiseSpec {
    /// Noise enters through the control input: `D = P·B·e₁ᵀ`.
    B,
    /// `D = e₁e₁ᵀ`, noise normal to the manifold only.
    E1,
    /// Explicit 3×3 matrix in transformed coordinates, row-major.
    Matrix(Vec<f64>),
}

impl std::str::FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("b") {
            return Ok(NoiseSpec::B);
        }
        if t.eq_ignore_ascii_case("e1") {
            return Ok(NoiseSpec::E1);
        }
        if let Some(rest) = t.strip_prefix("matrix:") {
            let v: std::result::Result<Vec<f64>, _> = rest.split(',').map(|p| p.trim().parse::<f64>()).collect();
            return match v {
                Ok(v) if v.len() == 9 => Ok(NoiseSpec::Matrix(v)),
                _ => Err(Error::InvalidInput(format!("noise matrix needs 9 numbers: {s}"))),
            };
        }
        Err(Error::InvalidInput(format!("unknown noise selection {s}")))
    }
}

impl std::fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseSpec::B => write!(f, "B"),
            NoiseSpec::E1 => write!(f, "e1"),
            NoiseSpec::Matrix(v) => {
                let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                write!(f, "matrix:{}", parts.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayModel {
    pub params: RelayParams,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub z: f64,
    pub t_slide: f64,
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub cal_a: DMatrix<f64>,
    pub cal_bl: DVector<f64>,
    pub cal_br: DVector<f64>,
    pub dt: DMatrix<f64>,
}

/// Deterministic reference points of the periodic orbit Γ in transformed coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseAnchors {
    /// Start of the sliding phase, taken as the transformed `X_int^(L)`.
    pub x_gamma_m: Vec<f64>,
    /// Start of the sliding phase as the exact fixed point of the half-return map.
    pub x_gamma_m_exact: Vec<f64>,
    pub x_gamma_s: Vec<f64>,
    pub x_gamma_e: Vec<f64>,
    pub x_gamma_r: Vec<f64>,
    pub t_gamma_s: f64,
    pub t_gamma_e: f64,
    pub t_gamma_r: f64,
    pub delta_minus: f64,
    pub delta_plus: f64,
    pub t_osc_gamma: f64,
    pub x_int_r: Vec<f64>,
    pub dist_r_to_int: f64,
}

/// `X_int^(L)`, `X_int^(R)` in original coordinates.
pub fn x_int(params: &RelayParams) -> ([f64; 3], [f64; 3]) {
    let (z, w) = (params.zeta, params.omega);
    let l = [0.0, -1.0 + 1.0 / (w * w), 2.0 + 2.0 * z / w];
    (l, [0.0, -l[1], -l[2]])
}

/// Closed-form sliding flow `(Ẋ₂, Ẋ₃) = (2X₂ + X₃, −X₂)` on the upper segment.
pub fn relay_sliding_solution(t: f64, x0: [f64; 2]) -> [f64; 2] {
    let et = t.exp();
    let s = x0[0] + x0[1];
    [et * x0[0] + et * t * s, -et * x0[0] + et * (1.0 - t) * s]
}

fn original_matrices(p: &RelayParams) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let (z, l, w) = (p.zeta, p.lambda, p.omega);
    let a = DMatrix::from_row_slice(
        3,
        3,
        &[-2.0 * z * w - l, 1.0, 0.0, -2.0 * z * w * l - w * w, 0.0, 1.0, -l * w * w, 0.0, 0.0],
    );
    let b = DVector::from_vec(vec![1.0, -2.0, 1.0]);
    let c = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    (a, b, c)
}

/// Checks assumptions (a1)–(a5) at the origin of a system in normal form.
pub fn check_normal_form(sys: &FilippovSde) -> Result<()> {
    let n = sys.dim();
    let o = vec![0.0; n];
    let fl = sys.drift(Side::Left, &o);
    let fr = sys.drift(Side::Right, &o);
    let jr = sys.jacobian(Side::Right, &o);
    let scale = 1e-10 * (1.0 + fr.amax() + jr.amax());
    if fr[0].abs() > scale {
        return Err(Error::NormalForm(format!("e1.phiR(0) = {} should vanish", fr[0])));
    }
    if fl[0] <= 0.0 {
        return Err(Error::NormalForm("e1.phiL(0) must be positive".into()));
    }
    if fr[1] <= 0.0 {
        return Err(Error::NormalForm("e2.phiR(0) must be positive".into()));
    }
    if jr[(0, 1)] <= 0.0 {
        return Err(Error::NormalForm("d(e1.phiR)/dx2 must be positive".into()));
    }
    for j in 2..n {
        if fr[j].abs() > scale || jr[(0, j)].abs() > scale {
            return Err(Error::NormalForm(format!("component {} not in normal form", j + 1)));
        }
    }
    Ok(())
}

impl RelayModel {
    /// Transformed system with the requested diffusion.
    pub fn system(&self, noise: &NoiseSpec) -> Result<FilippovSde> {
        let field = AffineField::new(self.cal_a.clone(), self.cal_bl.clone(), self.cal_a.clone(), self.cal_br.clone())?;
        FilippovSde::new(Arc::new(field), self.diffusion(noise)?)
    }

    pub fn diffusion(&self, noise: &NoiseSpec) -> Result<DMatrix<f64>> {
        Ok(match noise {
            NoiseSpec::B => self.dt.clone(),
            NoiseSpec::E1 => {
                let mut d = DMatrix::zeros(3, 3);
                d[(0, 0)] = 1.0;
                d
            }
            NoiseSpec::Matrix(v) => {
                if v.len() != 9 {
                    return Err(Error::InvalidInput("noise matrix needs 9 entries".into()));
                }
                DMatrix::from_row_slice(3, 3, v)
            }
        })
    }

    pub fn to_transformed(&self, x: &[f64]) -> Vec<f64> {
        (&self.p * DVector::from_column_slice(x) + &self.q).as_slice().to_vec()
    }

    pub fn to_original(&self, x: &[f64]) -> Vec<f64> {
        let pinv = self.p.clone().try_inverse().expect("P is unit lower triangular");
        (pinv * (DVector::from_column_slice(x) - &self.q)).as_slice().to_vec()
    }

    /// Image of `x` under the symmetry `X ↦ −X`, i.e. `x ↦ 2Q − x`.
    pub fn mirror(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.q.iter()).map(|(xi, qi)| 2.0 * qi - xi).collect()
    }
}

/// Deterministic half oscillation `x^M → x^S → x^E → x^R` with its three durations.
pub fn half_oscillation(
    sys: &FilippovSde,
    x_m: &[f64],
    delta_minus: f64,
    delta_plus: f64,
    opts: &IntegrateOptions,
) -> Result<([f64; 3], [Vec<f64>; 3])> {
    let slide = IntegrateOptions { continue_after_sliding_exit: false, ..*opts };
    let s = integrate_deterministic(sys, x_m, StopEvent::x2(delta_minus), &slide)?;
    let e = integrate_deterministic(sys, &s.hit_point, StopEvent::x2(delta_plus), opts)?;
    let r = integrate_deterministic(sys, &e.hit_point, StopEvent::manifold(), opts)?;
    Ok(([s.hit_time, e.hit_time, r.hit_time], [s.hit_point, e.hit_point, r.hit_point]))
}

/// Builds the relay model and integrates the deterministic orbit for its phase anchors.
pub fn build_relay_model(params: RelayParams, delta_minus: f64, delta_plus: f64) -> Result<(RelayModel, PhaseAnchors)> {
    let RelayParams { zeta, lambda, omega } = params;
    if !(lambda > 0.0) || omega == 0.0 || !(zeta > 0.0 && zeta < 1.0) {
        return Err(Error::InvalidInput("need lambda > 0, omega != 0, 0 < zeta < 1".into()));
    }
    if !(delta_minus < 0.0 && delta_plus > 0.0) {
        return Err(Error::InvalidInput("need deltaMinus < 0 < deltaPlus".into()));
    }
    let (a, b, c) = original_matrices(&params);
    let (xl, xr) = x_int(&params);
    let x2_at = |t: f64| relay_sliding_solution(t, [xl[1], xl[2]])[0] - 1.0;
    let mut lo = 0.0;
    let mut bracket = None;
    let mut t = 0.05;
    while t <= 100.0 + 1e-12 {
        if x2_at(lo).signum() != x2_at(t).signum() {
            bracket = Some((lo, t));
            break;
        }
        lo = t;
        t += 0.05;
    }
    let (ta, tb) = bracket.ok_or(Error::NoSlidingRoot)?;
    let t_slide = brent(x2_at, ta, tb, 1e-14)?;
    let z = relay_sliding_solution(t_slide, [xl[1], xl[2]])[1];

    let p = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0 / (z + 2.0), 1.0]);
    let q = DVector::from_vec(vec![0.0, -1.0, -1.0 / (z + 2.0) - z]);
    let pinv = p.clone().try_inverse().ok_or_else(|| Error::NormalForm("P singular".into()))?;
    let cal_a = &p * &a * &pinv;
    let pb = &p * &b;
    let aq = &cal_a * &q;
    let cal_bl = &pb - &aq;
    let cal_br = -&pb - &aq;
    let mut dt = DMatrix::zeros(3, 3);
    dt.set_column(0, &pb);
    let model = RelayModel { params, a, b, c, z, t_slide, p, q, cal_a, cal_bl, cal_br, dt };

    let sys = model.system(&NoiseSpec::B)?;
    check_normal_form(&sys)?;
    let opts = IntegrateOptions::default();
    let x_m = model.to_transformed(&xl);
    let (times, points) = half_oscillation(&sys, &x_m, delta_minus, delta_plus, &opts)?;
    let [x_s, x_e, x_r] = points;
    let x_int_r = model.to_transformed(&xr);
    let dist = x_r.iter().zip(&x_int_r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();

    let mut exact = model.mirror(&x_r);
    for _ in 0..50 {
        let (_, pts) = half_oscillation(&sys, &exact, delta_minus, delta_plus, &opts)?;
        let next = model.mirror(&pts[2]);
        let change = next.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        exact = next;
        if change < 1e-13 {
            break;
        }
    }

    let anchors = PhaseAnchors {
        x_gamma_m: x_m,
        x_gamma_m_exact: exact,
        x_gamma_s: x_s,
        x_gamma_e: x_e,
        x_gamma_r: x_r,
        t_gamma_s: times[0],
        t_gamma_e: times[1],
        t_gamma_r: times[2],
        delta_minus,
        delta_plus,
        t_osc_gamma: 2.0 * times.iter().sum::<f64>(),
        x_int_r,
        dist_r_to_int: dist,
    };
    Ok((model, anchors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper() -> (RelayModel, PhaseAnchors) {
        build_relay_model(RelayParams::default(), -0.1, 0.2).unwrap()
    }

    #[test]
    fn z_value() {
        assert!((paper().0.z - 2.561).abs() < 1e-3);
    }

    #[test]
    fn x_int_right_by_substitution() {
        let (_, r) = x_int(&RelayParams::default());
        assert!((r[1] - 0.96).abs() < 1e-15 && (r[2] + 2.2).abs() < 1e-15);
    }

    #[test]
    fn sliding_solution_identities() {
        assert_eq!(relay_sliding_solution(0.0, [0.3, -0.7]), [0.3, -0.7]);
        let v = relay_sliding_solution(0.8, [0.4, -0.4]);
        let e = 0.8f64.exp() * 0.4;
        assert!((v[0] - e).abs() < 1e-14 && (v[1] + e).abs() < 1e-14);
        let m = paper().0;
        let (l, _) = x_int(&m.params);
        let end = relay_sliding_solution(m.t_slide, [l[1], l[2]]);
        assert!((end[0] - 1.0).abs() < 1e-12 && (end[1] - m.z).abs() < 1e-15);
    }

    #[test]
    fn transformed_constants() {
        let m = paper().0;
        let z = m.z;
        let bl = [2.0, z - 2.0, 2.0 * z / (z + 2.0)];
        let br = [0.0, z + 2.0, 0.0];
        for i in 0..3 {
            assert!((m.cal_bl[i] - bl[i]).abs() < 1e-12);
            assert!((m.cal_br[i] - br[i]).abs() < 1e-12);
        }
        let d1 = [1.0, -2.0, z / (z + 2.0)];
        for i in 0..3 {
            assert!((m.dt[(i, 0)] - d1[i]).abs() < 1e-12);
            assert_eq!(m.dt[(i, 1)], 0.0);
        }
        let (zt, l, w) = (0.5, 0.05, 5.0);
        let s = z + 2.0;
        let row2 = [-2.0 * zt * w * l - w * w, -1.0 / s, 1.0];
        let row3 = [-l * w * w - (2.0 * zt * w * l + w * w) / s, -1.0 / (s * s), 1.0 / s];
        for j in 0..3 {
            assert!((m.cal_a[(1, j)] - row2[j]).abs() < 1e-12);
            assert!((m.cal_a[(2, j)] - row3[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn eigenvalues_of_a() {
        let m = paper().0;
        let mut ev: Vec<_> = m.a.complex_eigenvalues().iter().cloned().collect();
        ev.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap().then(a.im.partial_cmp(&b.im).unwrap()));
        let (z, l, w) = (0.5f64, 0.05f64, 5.0f64);
        let im = w * (1.0 - z * z).sqrt();
        assert!((ev[0].re + w * z).abs() < 1e-9 && (ev[0].im + im).abs() < 1e-9);
        assert!((ev[1].re + w * z).abs() < 1e-9 && (ev[1].im - im).abs() < 1e-9);
        assert!((ev[2].re + l).abs() < 1e-9 && ev[2].im.abs() < 1e-9);
    }

    #[test]
    fn transform_round_trip_and_mirror() {
        let m = paper().0;
        let x = [0.3, -1.2, 2.5];
        let back = m.to_original(&m.to_transformed(&x));
        assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-14));
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let lhs = m.mirror(&m.to_transformed(&x));
        let rhs = m.to_transformed(&neg);
        assert!(lhs.iter().zip(&rhs).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn noise_spec_parsing() {
        assert_eq!("B".parse::<NoiseSpec>().unwrap(), NoiseSpec::B);
        assert_eq!("e1".parse::<NoiseSpec>().unwrap(), NoiseSpec::E1);
        let m: NoiseSpec = "matrix:1,0,0,0,1,0,0,0,1".parse().unwrap();
        assert_eq!(m.to_string(), "matrix:1,0,0,0,1,0,0,0,1");
        assert!("matrix:1,2".parse::<NoiseSpec>().is_err());
        assert!("x".parse::<NoiseSpec>().is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        let bad = RelayParams { zeta: 1.5, ..Default::default() };
        assert!(build_relay_model(bad, -0.1, 0.2).is_err());
        assert!(build_relay_model(RelayParams::default(), 0.1, 0.2).is_err());
    }
}
