//! Chaining the phase theories into half- and full-oscillation statistics.
//!
//! Each phase is described conditionally on starting at its deterministic anchor. The
//! unconditioned statistics follow by first-order propagation of the spread in the start
//! point through the deterministic passage maps, whose derivatives are taken here by
//! central differences.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filippov::{half_oscillation, integrate_deterministic, FilippovSde, IntegrateOptions, PhaseAnchors, StopEvent};
use crate::mc::{sample_passages, Direction, Plane, SimConfig};
use crate::numerics::pairwise_sum;
use crate::regular::{mean_tr, mean_xr, passage_var_cov, MeanTimeForm, MeanXrQuadrature, RegularTheory};
use crate::sliding::{averaged_passage_means, averaged_path, diffusion_matrices, passage_var_cov_sliding};
use crate::stats::summarize;

/// Conditional statistics of one phase from its deterministic start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub diff_t: f64,
    pub var_t: f64,
    pub diff_x: DVector<f64>,
    pub cov_x: DMatrix<f64>,
}

impl PhaseStats {
    pub fn zero(n: usize) -> Self {
        Self { diff_t: 0.0, var_t: 0.0, diff_x: DVector::zeros(n), cov_x: DMatrix::zeros(n, n) }
    }
}

/// Inputs to the chain: regular from `x_Γ^E`, sliding from `x_Γ^M`, escape from `x_Γ^S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseInputs {
    pub regular: PhaseStats,
    pub sliding: PhaseStats,
    pub escape: PhaseStats,
}

impl PhaseInputs {
    /// `Diff(x^M) = −Diff(x^R | x_Γ^E)` under the odd symmetry of the system.
    pub fn diff_x_m(&self) -> DVector<f64> {
        -&self.regular.diff_x
    }

    /// `Cov(x^M) = Cov(x^R | x_Γ^E)`: the symmetry is linear with part `−I`.
    pub fn cov_x_m(&self) -> DMatrix<f64> {
        self.regular.cov_x.clone()
    }
}

/// Regular-phase statistics from `x_Γ^E`.
pub fn regular_stats(th: &RegularTheory, eps: f64) -> Result<PhaseStats> {
    let (var_t, cov_x) = passage_var_cov(th, eps)?;
    let mean_t = mean_tr(th, eps, MeanTimeForm::General)?;
    let mean_x = mean_xr(th, eps, MeanXrQuadrature::default())?;
    Ok(PhaseStats { diff_t: mean_t - th.t_dr, var_t, diff_x: mean_x - &th.x_dr, cov_x })
}

/// Sliding-phase statistics from `x_Γ^M`, with `x₁` prepended to the slow coordinates.
pub fn sliding_stats(sys: &FilippovSde, anchors: &PhaseAnchors, eps: f64, h: f64) -> Result<PhaseStats> {
    let path = averaged_path(sys, &anchors.x_gamma_m[1..], anchors.delta_minus, h)?;
    let means = averaged_passage_means(sys, &path, eps)?;
    let diff = diffusion_matrices(sys, &path)?;
    let vc = passage_var_cov_sliding(sys, &diff, &path, eps)?;
    let n = sys.dim();
    let mut diff_x = DVector::zeros(n);
    diff_x[0] = means.x1;
    diff_x.rows_mut(1, n - 1).copy_from(&(&means.y1 * eps));
    let mut cov_x = DMatrix::zeros(n, n);
    cov_x[(0, 0)] = vc.var_x1;
    cov_x.view_mut((1, 1), (n - 1, n - 1)).copy_from(&vc.cov_y);
    Ok(PhaseStats { diff_t: eps * means.t1, var_t: vc.var_t, diff_x, cov_x })
}

/// Escape-phase surrogate: Monte-Carlo passages from `x_Γ^S` to `x₂ = δ⁺`.
pub fn escape_surrogate(sys: &FilippovSde, anchors: &PhaseAnchors, cfg: &SimConfig) -> Result<PhaseStats> {
    let plane = Plane { index: 1, level: anchors.delta_plus, direction: Direction::Up };
    let samples = sample_passages(sys, cfg, &anchors.x_gamma_s, &plane)?;
    let st = summarize(&samples, anchors.t_gamma_e, &anchors.x_gamma_e)?;
    let n = sys.dim();
    let mut cov_x = st.cov_location.clone();
    for i in 0..n {
        cov_x[(1, i)] = 0.0;
        cov_x[(i, 1)] = 0.0;
    }
    let diff_x = DVector::from_fn(n, |i, _| if i == 1 { 0.0 } else { st.location[i].diff });
    Ok(PhaseStats { diff_t: st.diff_time, var_t: st.var_time, diff_x, cov_x })
}

/// Derivatives of the deterministic passage maps at the anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMatrices {
    /// `D_x t_d^S(x_Γ^M)`.
    pub dts_m: DVector<f64>,
    /// `D_x t_d^E(x_Γ^S)`.
    pub dte_s: DVector<f64>,
    /// `D_x t_d^R(x_Γ^E)`.
    pub dtr_e: DVector<f64>,
    /// `D_x x_d^S(x_Γ^M)`.
    pub dxs_m: DMatrix<f64>,
    /// `D_x x_d^E(x_Γ^S)`.
    pub dxe_s: DMatrix<f64>,
    /// `D²_x t_d^S(x_Γ^M)`; excluded from the default prediction.
    pub d2ts_m: DMatrix<f64>,
    /// Perturbation actually used.
    pub h: f64,
}

type PassageMap<'a> = dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)> + 'a;

/// Central-difference gradient of the time and Jacobian of the location.
fn differentiate(map: &PassageMap<'_>, x0: &[f64], h: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x0.len();
    let mut grad = DVector::zeros(n);
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut xp = x0.to_vec();
        let mut xm = x0.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (tp, pp) = map(&xp)?;
        let (tm, pm) = map(&xm)?;
        grad[j] = (tp - tm) / (2.0 * h);
        for i in 0..n {
            jac[(i, j)] = (pp[i] - pm[i]) / (2.0 * h);
        }
    }
    Ok((grad, jac))
}

fn hessian_time(map: &PassageMap<'_>, x0: &[f64], h: f64) -> Result<DMatrix<f64>> {
    let n = x0.len();
    let t0 = map(x0)?.0;
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let at = |si: f64, sj: f64| -> Result<f64> {
                let mut x = x0.to_vec();
                x[i] += si * h;
                x[j] += sj * h;
                Ok(map(&x)?.0)
            };
            let v = if i == j {
                (at(1.0, 0.0)? - 2.0 * t0 + at(-1.0, 0.0)?) / (h * h)
            } else {
                (at(1.0, 1.0)? - at(1.0, -1.0)? - at(-1.0, 1.0)? + at(-1.0, -1.0)?) / (4.0 * h * h)
            };
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

fn sensitivities_at(sys: &FilippovSde, anchors: &PhaseAnchors, h: f64, opts: &IntegrateOptions) -> Result<SensitivityMatrices> {
    let slide = IntegrateOptions { continue_after_sliding_exit: false, ..*opts };
    let to_s = |x: &[f64]| {
        integrate_deterministic(sys, x, StopEvent::x2(anchors.delta_minus), &slide).map(|t| (t.hit_time, t.hit_point))
    };
    let to_e = |x: &[f64]| {
        integrate_deterministic(sys, x, StopEvent::x2(anchors.delta_plus), opts).map(|t| (t.hit_time, t.hit_point))
    };
    let to_r = |x: &[f64]| integrate_deterministic(sys, x, StopEvent::manifold(), opts).map(|t| (t.hit_time, t.hit_point));
    let (dts_m, dxs_m) = differentiate(&to_s, &anchors.x_gamma_m, h)?;
    let (dte_s, dxe_s) = differentiate(&to_e, &anchors.x_gamma_s, h)?;
    let (dtr_e, _) = differentiate(&to_r, &anchors.x_gamma_e, h)?;
    let d2ts_m = hessian_time(&to_s, &anchors.x_gamma_m, 1e3 * h)?;
    Ok(SensitivityMatrices { dts_m, dte_s, dtr_e, dxs_m, dxe_s, d2ts_m, h })
}

/// Central differences with step `h` (normally `1e-5`), retried once at `h/10` if a
/// perturbed passage is lost.
///
/// Columns along `e₁` at a point on the manifold straddle the switch and are only
/// meaningful one-sided; they meet zero rows of `Cov(x^R)` and `Diff(x^R)` in the chain.
pub fn sensitivities(sys: &FilippovSde, anchors: &PhaseAnchors, h: f64) -> Result<SensitivityMatrices> {
    let opts = IntegrateOptions::default();
    sensitivities_at(sys, anchors, h, &opts).or_else(|_| sensitivities_at(sys, anchors, h / 10.0, &opts))
}

pub const DIFF_TERM_LABELS: [&str; 9] = [
    "Diff(tS|xM)",
    "DtS.Diff(xM)",
    "Diff(tE|xS)",
    "DtE.Diff(xS|xM)",
    "DtE.DxS.Diff(xM)",
    "Diff(tR|xE)",
    "DtR.Diff(xE|xS)",
    "DtR.DxE.Diff(xS|xM)",
    "DtR.DxE.DxS.Diff(xM)",
];

pub const VAR_TERM_LABELS: [&str; 9] = [
    "Var(tS|xM)",
    "DtS'Cov(xM)DtS",
    "Var(tE|xS)",
    "DtE'Cov(xS|xM)DtE",
    "DtE'DxS Cov(xM) DxS'DtE",
    "Var(tR|xE)",
    "DtR'Cov(xE|xS)DtR",
    "DtR'DxE Cov(xS|xM) DxE'DtR",
    "DtR'DxE DxS Cov(xM) DxS'DxE'DtR",
];

/// Indices of the terms kept by the three-term approximations.
pub const DIFF_RETAINED: [usize; 3] = [5, 1, 0];
pub const VAR_RETAINED: [usize; 3] = [1, 5, 8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTerms {
    pub terms: [f64; 9],
    pub three_term: f64,
    pub full: f64,
}

fn assemble(terms: [f64; 9], keep: [usize; 3]) -> ChainTerms {
    let kept: Vec<f64> = keep.iter().map(|&i| terms[i]).collect();
    ChainTerms { terms, three_term: pairwise_sum(&kept), full: pairwise_sum(&terms) }
}

/// The nine first-order terms of `Diff(t_½osc)`.
pub fn diff_chain(p: &PhaseInputs, s: &SensitivityMatrices) -> ChainTerms {
    let dm = p.diff_x_m();
    let dxs_dm = &s.dxs_m * &dm;
    let terms = [
        p.sliding.diff_t,
        s.dts_m.dot(&dm),
        p.escape.diff_t,
        s.dte_s.dot(&p.sliding.diff_x),
        s.dte_s.dot(&dxs_dm),
        p.regular.diff_t,
        s.dtr_e.dot(&p.escape.diff_x),
        s.dtr_e.dot(&(&s.dxe_s * &p.sliding.diff_x)),
        s.dtr_e.dot(&(&s.dxe_s * &dxs_dm)),
    ];
    assemble(terms, DIFF_RETAINED)
}

fn quad(g: &DVector<f64>, c: &DMatrix<f64>) -> f64 {
    (g.transpose() * c * g)[(0, 0)]
}

/// The nine first-order terms of `Var(t_½osc)`, treating the three phase times as
/// uncorrelated given their starts.
pub fn var_chain(p: &PhaseInputs, s: &SensitivityMatrices) -> ChainTerms {
    let cm = p.cov_x_m();
    let cs_m = &s.dxs_m * &cm * s.dxs_m.transpose();
    let te = s.dxe_s.transpose() * &s.dtr_e;
    let terms = [
        p.sliding.var_t,
        quad(&s.dts_m, &cm),
        p.escape.var_t,
        quad(&s.dte_s, &p.sliding.cov_x),
        quad(&s.dte_s, &cs_m),
        p.regular.var_t,
        quad(&s.dtr_e, &p.escape.cov_x),
        quad(&te, &p.sliding.cov_x),
        quad(&te, &cs_m),
    ];
    assemble(terms, VAR_RETAINED)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillationPrediction {
    pub diff_half: f64,
    pub diff_osc: f64,
    pub var_half: f64,
    pub var_osc: f64,
    pub std_half: f64,
    pub std_osc: f64,
    pub varrho: f64,
    pub diff: ChainTerms,
    pub var: ChainTerms,
    /// Whether the full nine-term sums were reported instead of the three-term ones.
    pub full_sums: bool,
    /// Assembled variance was negative and clamped to zero.
    pub clamped: bool,
    /// `Σ D²t^S ∘ Cov(x^M)`, reported but not included.
    pub hessian_term: f64,
}

pub fn predict(p: &PhaseInputs, s: &SensitivityMatrices, varrho: f64, full_sums: bool) -> OscillationPrediction {
    let diff = diff_chain(p, s);
    let var = var_chain(p, s);
    let pick = |c: &ChainTerms| if full_sums { c.full } else { c.three_term };
    let diff_half = pick(&diff);
    let raw = pick(&var);
    let clamped = raw < 0.0;
    let var_half = raw.max(0.0);
    let var_osc = (1.0 + (1.0 + varrho).powi(2)) * var_half;
    let hessian_term = s.d2ts_m.component_mul(&p.cov_x_m()).sum();
    OscillationPrediction {
        diff_half,
        diff_osc: 2.0 * diff_half,
        var_half,
        var_osc,
        std_half: var_half.sqrt(),
        std_osc: var_osc.sqrt(),
        varrho,
        diff,
        var,
        full_sums,
        clamped,
        hessian_term,
    }
}

/// Deterministic half-oscillation time from a point `x^R` on the manifold, mapped by the
/// symmetry to the start of the next half.
fn next_half_time(
    sys: &FilippovSde,
    anchors: &PhaseAnchors,
    mirror: &dyn Fn(&[f64]) -> Vec<f64>,
    x_r: &[f64],
) -> Result<f64> {
    let mut start = mirror(x_r);
    start[0] = 0.0;
    let opts = IntegrateOptions::default();
    let (times, _) = half_oscillation(sys, &start, anchors.delta_minus, anchors.delta_plus, &opts)?;
    Ok(times.iter().sum())
}

/// `ϱ` for a given regression of the end point on the half-oscillation time:
/// `E[x^R | t] = x_R + slope·(t − t_d)`.
pub fn varrho_from_slope(
    sys: &FilippovSde,
    anchors: &PhaseAnchors,
    mirror: &dyn Fn(&[f64]) -> Vec<f64>,
    x_r: &[f64],
    slope: &DVector<f64>,
    dt_pert: f64,
) -> Result<f64> {
    let base = next_half_time(sys, anchors, mirror, x_r)?;
    let shifted: Vec<f64> = x_r.iter().zip(slope.iter()).map(|(x, s)| x + s * dt_pert).collect();
    Ok((next_half_time(sys, anchors, mirror, &shifted)? - base) / dt_pert)
}

/// Regression slope `Cov(x^R, t^R) / Var(t^R)` from the linear passage approximation:
/// `t − t_d ≈ −ξ₁/v₁`, `x − x_d ≈ Pξ`, `ξ ~ N(0, εK)`. Independent of `ε`.
pub fn regression_slope(th: &RegularTheory) -> Result<DVector<f64>> {
    if !(th.kappa11 > 1e-14) {
        return Err(Error::DegenerateCovariance);
    }
    let v1 = th.v[0];
    let p = th.projector()?;
    let mut slope = &p * th.k_dr.column(0) * (-v1 / th.kappa11);
    slope[0] = 0.0;
    Ok(slope)
}

/// Finite-difference `ϱ` around the regular passage end point.
pub fn estimate_varrho(
    sys: &FilippovSde,
    anchors: &PhaseAnchors,
    mirror: &dyn Fn(&[f64]) -> Vec<f64>,
    regular: &RegularTheory,
    dt_pert: f64,
) -> Result<f64> {
    let slope = regression_slope(regular)?;
    varrho_from_slope(sys, anchors, mirror, regular.x_dr.as_slice(), &slope, dt_pert)
}
