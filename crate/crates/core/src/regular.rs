//! First-passage statistics of the smooth right-half flow to the manifold.
//!
//! Fluctuations about the deterministic path are Gaussian with covariance `εK(t)`, where
//! `K̇ = JK + KJᵀ + DDᵀ`, `K(0) = 0`. Projecting at the deterministic hit gives the
//! `O(√ε)` spreads. The `O(ε)` mean shifts come from the absorbing boundary layer:
//! the local density is `P⁰ = −f⁰ e^{2v₁z/α}` at leading order and `g¹` carries the next
//! order, so the passage flux is
//!
//! `k(y,t) = −v₁ p_f(0,y,t) + (α/2) ε ∂₁p_f(0,y,t) + (α/2) ε^{(1−N)/2} g¹(u,τ)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filippov::{integrate_deterministic, FilippovSde, IntegrateOptions, RelayParams, Side, StopEvent};

/// Deterministic passage data and covariance along the path.
#[derive(Debug, Clone)]
pub struct RegularTheory {
    sys: FilippovSde,
    /// Uniform time grid from 0 to `t_dr` (last node exactly `t_dr`).
    pub times: Vec<f64>,
    pub x_d: Vec<DVector<f64>>,
    pub k: Vec<DMatrix<f64>>,
    pub t_dr: f64,
    pub x_dr: DVector<f64>,
    /// Drift at the deterministic hit.
    pub v: DVector<f64>,
    pub k_dr: DMatrix<f64>,
    pub kappa11: f64,
    pub kappa11_dot: f64,
    /// `ẍ_{d,1}` at the hit.
    pub xddot1: f64,
    pub alpha: f64,
}

/// Right-branch state `[x, vec K]` and its derivative.
fn augmented_rhs(sys: &FilippovSde, dd: &DMatrix<f64>, s: &[f64], out: &mut [f64]) {
    let n = sys.dim();
    sys.drift_into(Side::Right, &s[..n], &mut out[..n]);
    let j = sys.jacobian(Side::Right, &s[..n]);
    let k = DMatrix::from_column_slice(n, n, &s[n..]);
    let jk = &j * &k;
    let kd = &jk + jk.transpose() + dd;
    out[n..].copy_from_slice(kd.as_slice());
}

/// Propagates `(x, K)` from `t0` to `t1` in `steps` RK4 steps, returning every node.
fn propagate(
    sys: &FilippovSde,
    x: &DVector<f64>,
    k: &DMatrix<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Vec<(f64, DVector<f64>, DMatrix<f64>)> {
    let n = sys.dim();
    let dd = sys.dd_t();
    let mut s: Vec<f64> = x.iter().chain(k.iter()).cloned().collect();
    let mut out = vec![s.clone(); 1];
    let h = (t1 - t0) / steps as f64;
    let mut next = s.clone();
    for _ in 0..steps {
        crate::numerics::rk4_step(&mut |z: &[f64], d: &mut [f64]| augmented_rhs(sys, &dd, z, d), &s, h, &mut next);
        std::mem::swap(&mut s, &mut next);
        out.push(s.clone());
    }
    out.into_iter()
        .enumerate()
        .map(|(i, v)| {
            (t0 + i as f64 * h, DVector::from_column_slice(&v[..n]), DMatrix::from_column_slice(n, n, &v[n..]))
        })
        .collect()
}

/// `K(t)` on a grid starting at 0 with `K(0) = 0`, following the right branch from `x0`.
pub fn covariance_k(sys: &FilippovSde, x0: &[f64], t_grid: &[f64]) -> Vec<DMatrix<f64>> {
    let n = sys.dim();
    let mut x = DVector::from_column_slice(x0);
    let mut k = DMatrix::zeros(n, n);
    let mut t = 0.0;
    let mut out = Vec::with_capacity(t_grid.len());
    for &tg in t_grid {
        if tg > t {
            let steps = ((tg - t) / 1e-3).ceil().max(1.0) as usize;
            let path = propagate(sys, &x, &k, t, tg, steps);
            let (_, xe, ke) = path.into_iter().last().unwrap();
            x = xe;
            k = ke;
            t = tg;
        }
        out.push(k.clone());
    }
    out
}

impl RegularTheory {
    /// Integrates the right branch from `x0` to `x₁ = 0` with step `h`.
    pub fn new(sys: &FilippovSde, x0: &[f64], h: f64) -> Result<Self> {
        let n = sys.dim();
        let opts = IntegrateOptions { h, ..Default::default() };
        let hit = integrate_deterministic(sys, x0, StopEvent::manifold(), &opts)?;
        let t_dr = hit.hit_time;
        let steps = (t_dr / h).ceil() as usize;
        let path = propagate(sys, &DVector::from_column_slice(x0), &DMatrix::zeros(n, n), 0.0, t_dr, steps);
        let (times, rest): (Vec<f64>, Vec<(DVector<f64>, DMatrix<f64>)>) =
            path.into_iter().map(|(t, x, k)| (t, (x, k))).unzip();
        let (x_d, k): (Vec<_>, Vec<_>) = rest.into_iter().unzip();
        let mut x_dr = x_d.last().unwrap().clone();
        x_dr[0] = 0.0;
        let k_dr = k.last().unwrap().clone();
        let v = sys.drift(Side::Right, x_dr.as_slice());
        let j = sys.jacobian(Side::Right, x_dr.as_slice());
        let dd = sys.dd_t();
        let kdot = &j * &k_dr + &k_dr * j.transpose() + &dd;
        let xddot1 = (&j * &v)[0];
        Ok(Self {
            sys: sys.clone(),
            times,
            x_d,
            k,
            t_dr,
            kappa11: k_dr[(0, 0)],
            kappa11_dot: kdot[(0, 0)],
            x_dr,
            v,
            k_dr,
            xddot1,
            alpha: dd[(0, 0)],
        })
    }

    pub fn system(&self) -> &FilippovSde {
        &self.sys
    }

    fn v1(&self) -> Result<f64> {
        let v1 = self.v[0];
        if v1.abs() < 1e-10 {
            return Err(Error::TangentialPassage);
        }
        Ok(v1)
    }

    /// `I − v e₁ᵀ / e₁ᵀv`.
    pub fn projector(&self) -> Result<DMatrix<f64>> {
        let v1 = self.v1()?;
        let n = self.v.len();
        let mut p = DMatrix::identity(n, n);
        for i in 0..n {
            p[(i, 0)] -= self.v[i] / v1;
        }
        Ok(p)
    }

    /// Boundary-layer data at the hit.
    pub fn boundary_layer(&self) -> Result<BoundaryLayer> {
        let v1 = self.v1()?;
        if v1 >= 0.0 {
            return Err(Error::NonDecayingBoundaryLayer);
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidInput("boundary layer needs alpha > 0".into()));
        }
        let n = self.v.len();
        let kinv = self.k_dr.clone().try_inverse().ok_or(Error::DegenerateCovariance)?;
        let det = self.k_dr.determinant();
        if !(det > 0.0) {
            return Err(Error::DegenerateCovariance);
        }
        let j = self.sys.jacobian(Side::Right, self.x_dr.as_slice());
        let dd = self.sys.dd_t();
        let p = self.projector()?;
        let c = &p * &self.k_dr * p.transpose();
        let sigma_u: Vec<f64> = (1..n).map(|i| c[(i, i)].max(0.0).sqrt()).collect();
        Ok(BoundaryLayer {
            kinv,
            norm: (2.0 * std::f64::consts::PI).powf(-(n as f64) / 2.0) / det.sqrt(),
            v: self.v.clone(),
            alpha: self.alpha,
            beta: DVector::from_fn(n - 1, |i, _| dd[(i + 1, 0)]),
            dphi1: DVector::from_fn(n - 1, |i, _| j[(0, i + 1)]),
            sigma_u,
            sigma_tau: self.kappa11.sqrt() / v1.abs(),
            truncation: 6.0,
        })
    }
}

/// `(Var t^R, Cov x^R)` at noise level `ε`.
pub fn passage_var_cov(th: &RegularTheory, eps: f64) -> Result<(f64, DMatrix<f64>)> {
    let v1 = th.v1()?;
    let p = th.projector()?;
    let mut cov = &p * &th.k_dr * p.transpose() * eps;
    let n = cov.nrows();
    for i in 0..n {
        cov[(0, i)] = 0.0;
        cov[(i, 0)] = 0.0;
    }
    Ok((eps * th.kappa11 / (v1 * v1), cov))
}

/// Which closed form to use for `E[t^R]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MeanTimeForm {
    /// `t_dR + ε/(2v₁²)(κ̇₁₁ − κ₁₁ẍ₁/v₁ − 1)`.
    General,
    /// `t_dR + (ω⁴/2)(κ̇₁₁ + λκ₁₁ − 1)ε`, valid near the relay's `x_int^(R)`.
    RelayShortcut(RelayParams),
}

/// Mean first-passage time to `O(ε)`.
pub fn mean_tr(th: &RegularTheory, eps: f64, form: MeanTimeForm) -> Result<f64> {
    let v1 = th.v1()?;
    Ok(match form {
        MeanTimeForm::General => {
            th.t_dr + eps / (2.0 * v1 * v1) * (th.kappa11_dot - th.kappa11 * th.xddot1 / v1 - th.alpha)
        }
        MeanTimeForm::RelayShortcut(p) => {
            th.t_dr + 0.5 * p.omega.powi(4) * (th.kappa11_dot + p.lambda * th.kappa11 - th.alpha) * eps
        }
    })
}

/// Local boundary-layer functions `f⁰`, `g¹` in the scaled variables `(u₂..u_N, τ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryLayer {
    kinv: DMatrix<f64>,
    norm: f64,
    v: DVector<f64>,
    alpha: f64,
    beta: DVector<f64>,
    /// `∂φ₁/∂x_i`, `i ≥ 2`, at the hit.
    dphi1: DVector<f64>,
    pub sigma_u: Vec<f64>,
    pub sigma_tau: f64,
    /// Half-width of the quadrature box in standard deviations.
    pub truncation: f64,
}

impl BoundaryLayer {
    fn chi(&self, u: &[f64], tau: f64) -> DVector<f64> {
        let n = self.v.len();
        DVector::from_fn(n, |i, _| if i == 0 { -self.v[0] * tau } else { u[i - 1] - self.v[i] * tau })
    }

    /// `(f⁰, K⁻¹χ)`.
    fn f0_parts(&self, u: &[f64], tau: f64) -> (f64, DVector<f64>) {
        let chi = self.chi(u, tau);
        let kc = &self.kinv * &chi;
        (self.norm * (-0.5 * chi.dot(&kc)).exp(), kc)
    }

    pub fn f0(&self, u: &[f64], tau: f64) -> f64 {
        self.f0_parts(u, tau).0
    }

    pub fn g1(&self, u: &[f64], tau: f64) -> f64 {
        let (f0, kc) = self.f0_parts(u, tau);
        let v1 = self.v[0];
        let f0_tau = kc.dot(&self.v) * f0;
        let mut g = -f0_tau / v1;
        for i in 0..u.len() {
            let f0_ui = -kc[i + 1] * f0;
            g += -(2.0 / self.alpha) * self.dphi1[i] * u[i] * f0;
            g += (2.0 * self.beta[i] / self.alpha - self.v[i + 1] / v1) * f0_ui;
        }
        g
    }

    /// `P⁰(z, u, τ) = −f⁰ e^{2v₁z/α}`.
    pub fn local_pdf_p0(&self, z: f64, u: &[f64], tau: f64) -> f64 {
        -self.f0(u, tau) * (2.0 * self.v[0] * z / self.alpha).exp()
    }
}

/// `P⁰` at the regular hit; errors when the layer would not decay.
pub fn local_pdf_p0(th: &RegularTheory, z: f64, u: &[f64], tau: f64) -> Result<f64> {
    Ok(th.boundary_layer()?.local_pdf_p0(z, u, tau))
}

/// Quadrature resolution for [`mean_xr`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanXrQuadrature {
    /// Box half-width in standard deviations.
    pub truncation: f64,
    /// Nodes per standard deviation along every axis.
    pub nodes_per_sigma: f64,
}

impl Default for MeanXrQuadrature {
    fn default() -> Self {
        Self { truncation: 6.0, nodes_per_sigma: 4.0 }
    }
}

/// `E[x^R]` to `O(ε)`, by nested trapezoidal quadrature of the passage flux over
/// `(u₂, …, u_N, τ)`. The first component is 0.
pub fn mean_xr(th: &RegularTheory, eps: f64, quad: MeanXrQuadrature) -> Result<DVector<f64>> {
    let n = th.v.len();
    if eps == 0.0 || th.alpha == 0.0 {
        return Ok(th.x_dr.clone());
    }
    let bl = th.boundary_layer()?;
    let v1 = th.v[0];
    let se = eps.sqrt();
    let m = n - 1;
    let axis = |sigma: f64| -> (Vec<f64>, f64) {
        let half = quad.truncation * sigma;
        let pts = (2.0 * quad.truncation * quad.nodes_per_sigma).ceil() as usize;
        let h = 2.0 * half / pts as f64;
        ((0..=pts).map(|i| -half + i as f64 * h).collect(), h)
    };
    let (taus, htau) = axis(bl.sigma_tau);
    let u_axes: Vec<(Vec<f64>, f64)> = bl.sigma_u.iter().map(|&s| axis(s.max(1e-300))).collect();

    // states (x_d, K) at every τ node, propagated from the stored grid
    let t_lo = th.t_dr + se * taus[0];
    let substeps = ((se * htau) / 1e-4).ceil().max(1.0) as usize;
    let (start_t, start_x, start_k) = if t_lo <= 0.0 {
        (0.0, th.x_d[0].clone(), th.k[0].clone())
    } else {
        let dt = th.times[1] - th.times[0];
        let i = ((t_lo / dt).floor() as usize).min(th.times.len() - 1);
        (th.times[i], th.x_d[i].clone(), th.k[i].clone())
    };
    let lead = propagate(&th.sys, &start_x, &start_k, start_t, t_lo.max(0.0), (((t_lo.max(0.0) - start_t) / 1e-4).ceil() as usize).max(1));
    let (_, mut xs, mut ks) = lead.into_iter().last().unwrap();
    let mut states = Vec::with_capacity(taus.len());
    for (i, &tau) in taus.iter().enumerate() {
        let t = th.t_dr + se * tau;
        if i > 0 {
            let t_prev = th.t_dr + se * taus[i - 1];
            let path = propagate(&th.sys, &xs, &ks, t_prev, t, substeps);
            let last = path.into_iter().last().unwrap();
            xs = last.1;
            ks = last.2;
        }
        if t < 0.0 {
            states.push(None);
        } else {
            let kinv = (&ks * eps).try_inverse();
            let det = (&ks * eps).determinant();
            states.push(kinv.filter(|_| det > 0.0).map(|ki| (xs.clone(), ki, det)));
        }
    }

    let mut acc = vec![0.0; m];
    let mut idx = vec![0usize; m];
    let total: usize = u_axes.iter().map(|a| a.0.len()).product();
    let cell: f64 = u_axes.iter().map(|a| a.1).product::<f64>() * htau;
    let norm = (2.0 * std::f64::consts::PI).powf(-(n as f64) / 2.0);
    let mut x = DVector::zeros(n);
    let mut u = vec![0.0; m];
    for (ti, &tau) in taus.iter().enumerate() {
        let Some((xd, kinv, det)) = &states[ti] else { continue };
        let pf_norm = norm / det.sqrt();
        idx.iter_mut().for_each(|v| *v = 0);
        for _ in 0..total {
            for d in 0..m {
                u[d] = u_axes[d].0[idx[d]];
                x[d + 1] = th.x_dr[d + 1] + se * u[d];
            }
            x[0] = 0.0;
            let dx = &x - xd;
            let kd = kinv * &dx;
            let pf = pf_norm * (-0.5 * dx.dot(&kd)).exp();
            let d1pf = -kd[0] * pf;
            // F = ε^{N/2} p_f, G = ε^{(N+1)/2} ∂₁p_f
            let scale = eps.powf(n as f64 / 2.0);
            let f = scale * pf;
            let g = scale * se * d1pf;
            let g1 = bl.g1(&u, tau);
            for j in 0..m {
                acc[j] += u[j] * (-v1 * f / se + 0.5 * th.alpha * g + 0.5 * th.alpha * g1);
            }
            for d in (0..m).rev() {
                idx[d] += 1;
                if idx[d] < u_axes[d].0.len() {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
    let mut out = th.x_dr.clone();
    for j in 0..m {
        out[j + 1] += eps * acc[j] * cell;
    }
    out[0] = 0.0;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filippov::AffineField;
    use std::sync::Arc;

    fn ou1d() -> FilippovSde {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        let b = DVector::zeros(2);
        let f = AffineField::new(a.clone(), b.clone(), a, b).unwrap();
        let mut d = DMatrix::zeros(2, 2);
        d[(0, 0)] = 1.0;
        FilippovSde::new(Arc::new(f), d).unwrap()
    }

    #[test]
    fn ou_variance_closed_form() {
        let k = covariance_k(&ou1d(), &[1.0, 1.0], &[0.0, 0.5, 1.0]);
        assert_eq!(k[0][(0, 0)], 0.0);
        let exact = (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((k[2][(0, 0)] - exact).abs() < 1e-8, "{}", k[2][(0, 0)]);
        assert!((exact - 0.432332).abs() < 1e-6);
    }

    #[test]
    fn zero_noise_gives_zero_covariance() {
        let sys = ou1d().with_diffusion(DMatrix::zeros(2, 2)).unwrap();
        let k = covariance_k(&sys, &[1.0, 1.0], &[0.7]);
        assert_eq!(k[0].norm(), 0.0);
    }

    /// Drift `(−1, 0)` on the right: straight transversal passage from x₁ = 1.
    fn straight() -> FilippovSde {
        let a = DMatrix::zeros(2, 2);
        let b = DVector::from_vec(vec![-1.0, 0.5]);
        let f = AffineField::new(a.clone(), b.clone(), a, b).unwrap();
        FilippovSde::new(Arc::new(f), DMatrix::identity(2, 2)).unwrap()
    }

    #[test]
    fn straight_passage_statistics() {
        let th = RegularTheory::new(&straight(), &[1.0, 0.0], 1e-3).unwrap();
        assert!((th.t_dr - 1.0).abs() < 1e-10);
        let (vt, cov) = passage_var_cov(&th, 0.01).unwrap();
        // K = t·I, Var t = ε κ₁₁ / v₁² = 0.01
        assert!((vt - 0.01).abs() < 1e-10);
        assert_eq!(cov.column(0).norm(), 0.0);
        // y-variance ε(1 + v₂²)
        assert!((cov[(1, 1)] - 0.01 * 1.25).abs() < 1e-10);
    }

    #[test]
    fn zero_noise_means_are_deterministic() {
        let sys = straight().with_diffusion(DMatrix::zeros(2, 2)).unwrap();
        let th = RegularTheory::new(&sys, &[1.0, 0.0], 1e-3).unwrap();
        assert_eq!(mean_tr(&th, 1e-3, MeanTimeForm::General).unwrap(), th.t_dr);
        assert_eq!(mean_xr(&th, 1e-3, Default::default()).unwrap(), th.x_dr);
    }

    #[test]
    fn p0_boundary_values() {
        let th = RegularTheory::new(&straight(), &[1.0, 0.0], 1e-3).unwrap();
        let bl = th.boundary_layer().unwrap();
        let u = [0.2];
        assert!((bl.local_pdf_p0(0.0, &u, 0.1) + bl.f0(&u, 0.1)).abs() < 1e-15);
        assert!(bl.local_pdf_p0(50.0, &u, 0.1).abs() < 1e-20);
    }

    #[test]
    fn tangential_passage_is_rejected() {
        let mut th = RegularTheory::new(&straight(), &[1.0, 0.0], 1e-3).unwrap();
        th.v[0] = 0.0;
        assert_eq!(passage_var_cov(&th, 1e-3).unwrap_err(), Error::TangentialPassage);
    }
}
