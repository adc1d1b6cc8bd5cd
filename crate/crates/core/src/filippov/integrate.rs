//! Fixed-step RK4 integration across the switching manifold.
//!
//! The integrator is a small state machine: it follows one smooth branch until either the
//! stop event or the manifold is crossed, enters sliding when both branches point at the
//! manifold, and leaves sliding where `aL` or `aR` vanishes. Event times are refined by
//! bisection on the fraction of the bracketing step.

use serde::{Deserialize, Serialize};

use super::field::{FilippovSde, Side};
use crate::error::{Error, Result};
use crate::numerics::rk4_step;

/// What terminates an integration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StopEvent {
    /// First crossing of `x[index] = level` after leaving the start point.
    Plane { index: usize, level: f64 },
    /// Integrate to this time exactly.
    Horizon(f64),
}

impl StopEvent {
    pub fn manifold() -> Self {
        StopEvent::Plane { index: 0, level: 0.0 }
    }

    pub fn x2(level: f64) -> Self {
        StopEvent::Plane { index: 1, level }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Smooth(Side),
    Sliding,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrateOptions {
    pub h: f64,
    /// Longest time searched for a plane event.
    pub horizon: f64,
    pub record_path: bool,
    /// Leave sliding through the boundary of the stable region instead of erroring.
    pub continue_after_sliding_exit: bool,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self { h: 1e-4, horizon: 100.0, record_path: false, continue_after_sliding_exit: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `(t, x)` after every accepted step, empty unless requested.
    pub path: Vec<(f64, Vec<f64>)>,
    pub hit_time: f64,
    pub hit_point: Vec<f64>,
    pub final_mode: Mode,
    /// Where sliding ended through the region boundary, if it did.
    pub sliding_exit: Option<(f64, Vec<f64>)>,
}

const EVENT_TOL: f64 = 1e-12;

fn initial_mode(sys: &FilippovSde, x0: &[f64]) -> Mode {
    match Side::of(x0[0]) {
        Some(s) => Mode::Smooth(s),
        None => {
            let c = sys.sliding_coeffs(&x0[1..]);
            if c.in_stable_region() {
                Mode::Sliding
            } else if c.a_r <= 0.0 {
                Mode::Smooth(Side::Right)
            } else {
                Mode::Smooth(Side::Left)
            }
        }
    }
}

/// Sliding vector field, unchecked so RK4 stages may graze the region boundary.
fn sliding_rhs(sys: &FilippovSde, y: &[f64], out: &mut [f64]) {
    let c = sys.sliding_coeffs(y);
    let s = c.a_l + c.a_r;
    for i in 0..out.len() {
        out[i] = (c.a_l * c.b_r[i] + c.a_r * c.b_l[i]) / s;
    }
}

struct Stepper<'a> {
    sys: &'a FilippovSde,
}

impl Stepper<'_> {
    fn step(&self, mode: Mode, x: &[f64], h: f64) -> Vec<f64> {
        let mut out = x.to_vec();
        match mode {
            Mode::Smooth(side) => {
                rk4_step(&mut |z: &[f64], d: &mut [f64]| self.sys.drift_into(side, z, d), x, h, &mut out);
            }
            Mode::Sliding => {
                let mut y = vec![0.0; x.len() - 1];
                rk4_step(&mut |z: &[f64], d: &mut [f64]| sliding_rhs(self.sys, z, d), &x[1..], h, &mut y);
                out[0] = 0.0;
                out[1..].copy_from_slice(&y);
            }
        }
        out
    }

    /// Fraction of the step at which `g` changes sign, refined until `|g| < EVENT_TOL`.
    fn refine<G: Fn(&[f64]) -> f64>(&self, mode: Mode, x: &[f64], h: f64, g: G) -> (f64, Vec<f64>) {
        let g0 = g(x);
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut best = self.step(mode, x, h);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let xm = self.step(mode, x, mid * h);
            let gm = g(&xm);
            if gm == 0.0 || (gm.signum() != g0.signum()) {
                hi = mid;
                best = xm;
                if gm.abs() < EVENT_TOL {
                    break;
                }
            } else {
                lo = mid;
            }
            if (hi - lo) * h < 1e-16 {
                break;
            }
        }
        (hi, best)
    }
}

fn crossed(g_prev: f64, g_new: f64) -> bool {
    g_prev != 0.0 && (g_new == 0.0 || g_new.signum() != g_prev.signum())
}

/// Integrate the deterministic Filippov system from `x0` until `stop`.
pub fn integrate_deterministic(
    sys: &FilippovSde,
    x0: &[f64],
    stop: StopEvent,
    opts: &IntegrateOptions,
) -> Result<Trajectory> {
    let n = sys.dim();
    if x0.len() != n {
        return Err(Error::InvalidInput(format!("x0 has length {}, expected {n}", x0.len())));
    }
    if !(opts.h > 0.0) {
        return Err(Error::InvalidInput("step must be positive".into()));
    }
    let stepper = Stepper { sys };
    let mut mode = initial_mode(sys, x0);
    let mut x = x0.to_vec();
    let mut t = 0.0;
    let mut path = Vec::new();
    let mut sliding_exit = None;
    let (target, t_end) = match stop {
        StopEvent::Plane { index, level } => {
            if index >= n {
                return Err(Error::InvalidInput("plane index out of range".into()));
            }
            (Some((index, level)), opts.horizon)
        }
        StopEvent::Horizon(t_end) => (None, t_end),
    };
    let target_res = |z: &[f64]| match target {
        Some((i, l)) => z[i] - l,
        None => f64::NAN,
    };
    let mut armed = target.is_some() && target_res(&x) != 0.0;
    let mut just_exited = false;
    if opts.record_path {
        path.push((t, x.clone()));
    }
    loop {
        let h = opts.h.min(t_end - t);
        if h <= 0.0 {
            return match target {
                Some(_) => Err(Error::NoPassage { horizon: opts.horizon }),
                None => Ok(Trajectory { path, hit_time: t, hit_point: x, final_mode: mode, sliding_exit }),
            };
        }
        let xn = stepper.step(mode, &x, h);
        // candidate events as (fraction, state, kind)
        let mut best: Option<(f64, Vec<f64>, u8)> = None;
        let consider = |cand: (f64, Vec<f64>), kind: u8, best: &mut Option<(f64, Vec<f64>, u8)>| {
            if best.as_ref().map_or(true, |b| cand.0 < b.0) {
                *best = Some((cand.0, cand.1, kind));
            }
        };
        if target.is_some() {
            let (g0, g1) = (target_res(&x), target_res(&xn));
            if armed && crossed(g0, g1) {
                consider(stepper.refine(mode, &x, h, target_res), 0, &mut best);
            }
        }
        match mode {
            Mode::Smooth(side) => {
                let opposite = match side {
                    Side::Right => xn[0] < 0.0,
                    Side::Left => xn[0] > 0.0,
                };
                let grazing = just_exited && xn[0].abs() < 1e-12;
                if opposite && !grazing && target.map_or(true, |(i, _)| i != 0) {
                    if x[0] == 0.0 {
                        // left the manifold the wrong way: the other branch decides
                        consider((0.0, x.clone()), 1, &mut best);
                    } else {
                        consider(stepper.refine(mode, &x, h, |z| z[0]), 1, &mut best);
                    }
                }
            }
            Mode::Sliding => {
                let al = |z: &[f64]| sys.sliding_coeffs(&z[1..]).a_l;
                let ar = |z: &[f64]| sys.sliding_coeffs(&z[1..]).a_r;
                if crossed(al(&x), al(&xn)) {
                    consider(stepper.refine(mode, &x, h, al), 2, &mut best);
                }
                if crossed(ar(&x), ar(&xn)) {
                    consider(stepper.refine(mode, &x, h, ar), 3, &mut best);
                }
            }
        }
        let Some((frac, xe, kind)) = best else {
            x = xn;
            t += h;
            if !armed && target.is_some() && target_res(&x) != 0.0 {
                armed = true;
            }
            just_exited = false;
            if opts.record_path {
                path.push((t, x.clone()));
            }
            continue;
        };
        t += frac * h;
        x = xe;
        if opts.record_path {
            path.push((t, x.clone()));
        }
        match kind {
            0 => {
                return Ok(Trajectory { path, hit_time: t, hit_point: x, final_mode: mode, sliding_exit });
            }
            1 => {
                x[0] = 0.0;
                let c = sys.sliding_coeffs(&x[1..]);
                mode = if c.in_stable_region() {
                    Mode::Sliding
                } else {
                    match mode {
                        Mode::Smooth(Side::Right) => Mode::Smooth(Side::Left),
                        _ => Mode::Smooth(Side::Right),
                    }
                };
                just_exited = false;
            }
            _ => {
                x[0] = 0.0;
                if !opts.continue_after_sliding_exit {
                    return Err(Error::SlidingBoundaryReached { time: t, point: x });
                }
                sliding_exit = Some((t, x.clone()));
                mode = Mode::Smooth(if kind == 3 { Side::Right } else { Side::Left });
                just_exited = true;
            }
        }
    }
}
