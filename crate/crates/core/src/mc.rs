//! Euler–Maruyama sampling of first passages and oscillation times.
//!
//! Every replicate owns a ChaCha8 stream selected by `(seed, replicate)`, so a sample
//! depends only on its own index and results are identical for any thread count.
//! Paths are not treated specially near the manifold: they chatter across `x₁ = 0` under
//! the plain two-branch scheme, with the right branch used at `x₁ = 0` exactly.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filippov::{FilippovSde, Side};
pub use crate::stats::PassageSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub eps: f64,
    pub dt: f64,
    pub seed: u64,
    pub n_samples: usize,
    pub burn_in_oscillations: usize,
    pub max_steps: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { eps: 1e-4, dt: 1e-5, seed: 1, n_samples: 1000, burn_in_oscillations: 10, max_steps: 1_000_000_000 }
    }
}

impl SimConfig {
    /// Desk-scale profile with `dt = 1e-4`.
    pub fn fast(eps: f64, seed: u64, n_samples: usize) -> Self {
        Self { eps, dt: 1e-4, seed, n_samples, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.eps >= 0.0) || self.n_samples < 1 {
            return Err(Error::InvalidInput("need dt > 0, eps >= 0, n_samples >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
    Either,
}

/// Target hyperplane `x[index] = level`, crossed in the given direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub index: usize,
    pub level: f64,
    pub direction: Direction,
}

impl Plane {
    pub fn crossed(&self, g_prev: f64, g_new: f64) -> bool {
        match self.direction {
            Direction::Up => g_prev < 0.0 && g_new >= 0.0,
            Direction::Down => g_prev > 0.0 && g_new <= 0.0,
            Direction::Either => (g_prev < 0.0 && g_new >= 0.0) || (g_prev > 0.0 && g_new <= 0.0),
        }
    }
}

/// Random stream for replicate `k`.
pub fn replicate_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

fn thread_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("FSTOCH_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
            if n > 0 {
                b = b.num_threads(n);
            }
        }
        b.build().expect("thread pool")
    })
}

/// Runs `f(k)` for `k in 0..n` in parallel, returning results in index order.
pub fn par_replicates<T: Send, F: Fn(u64) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    thread_pool().install(|| (0..n as u64).into_par_iter().map(&f).collect())
}

/// Precomputed Euler–Maruyama step for a fixed `(ε, dt)`.
pub struct EmScheme<'a> {
    sys: &'a FilippovSde,
    dt: f64,
    /// Nonzero columns of `√(ε dt)·D` as `(column, values)`.
    cols: Vec<Vec<f64>>,
    drift: Vec<f64>,
    xi: Vec<f64>,
}

impl<'a> EmScheme<'a> {
    pub fn new(sys: &'a FilippovSde, eps: f64, dt: f64) -> Self {
        let d = sys.diffusion();
        let n = sys.dim();
        let s = (eps * dt).sqrt();
        let cols: Vec<Vec<f64>> = (0..n)
            .filter(|&j| s > 0.0 && d.column(j).iter().any(|v| *v != 0.0))
            .map(|j| d.column(j).iter().map(|v| v * s).collect())
            .collect();
        let m = cols.len();
        Self { sys, dt, cols, drift: vec![0.0; n], xi: vec![0.0; m] }
    }

    /// Number of normals consumed per step.
    pub fn noise_dim(&self) -> usize {
        self.cols.len()
    }

    /// Advances `x` in place using the given standard normals (one per nonzero column).
    #[inline]
    pub fn step_with(&mut self, x: &mut [f64], xi: &[f64]) {
        let side = if x[0] < 0.0 { Side::Left } else { Side::Right };
        self.sys.drift_into(side, x, &mut self.drift);
        for i in 0..x.len() {
            x[i] += self.drift[i] * self.dt;
        }
        for (c, z) in self.cols.iter().zip(xi) {
            for i in 0..x.len() {
                x[i] += c[i] * z;
            }
        }
    }

    #[inline]
    pub fn step<R: rand::Rng>(&mut self, x: &mut [f64], rng: &mut R) {
        for z in self.xi.iter_mut() {
            *z = StandardNormal.sample(rng);
        }
        let xi = std::mem::take(&mut self.xi);
        self.step_with(x, &xi);
        self.xi = xi;
    }
}

/// One Euler–Maruyama step `x' = x + φ(x)dt + √ε D √dt ξ` with a full `N`-vector of normals.
pub fn em_step(sys: &FilippovSde, x: &[f64], dt: f64, eps: f64, xi: &[f64]) -> Vec<f64> {
    let side = if x[0] < 0.0 { Side::Left } else { Side::Right };
    let f = sys.drift(side, x);
    let noise = sys.diffusion() * nalgebra::DVector::from_column_slice(xi) * (eps * dt).sqrt();
    (0..x.len()).map(|i| x[i] + f[i] * dt + noise[i]).collect()
}

/// First passage of one replicate driven by `rng`.
pub fn first_passage_with<R: rand::Rng>(
    sys: &FilippovSde,
    cfg: &SimConfig,
    x0: &[f64],
    plane: &Plane,
    rng: &mut R,
) -> Result<PassageSample> {
    let mut em = EmScheme::new(sys, cfg.eps, cfg.dt);
    let mut x = x0.to_vec();
    let mut prev = x.clone();
    let mut t = 0.0;
    let mut g_prev = x[plane.index] - plane.level;
    for _ in 0..cfg.max_steps {
        prev.copy_from_slice(&x);
        em.step(&mut x, rng);
        let g = x[plane.index] - plane.level;
        if plane.crossed(g_prev, g) {
            let th = if g_prev == g { 1.0 } else { g_prev / (g_prev - g) };
            let location = prev.iter().zip(&x).map(|(a, b)| a + th * (b - a)).collect();
            return Ok(PassageSample { time: t + th * cfg.dt, location });
        }
        g_prev = g;
        t += cfg.dt;
    }
    Err(Error::PassageNotReached { steps: cfg.max_steps })
}

/// First passage of replicate `k`, using the stream for `(cfg.seed, k)`.
pub fn first_passage(sys: &FilippovSde, cfg: &SimConfig, x0: &[f64], plane: &Plane, k: u64) -> Result<PassageSample> {
    first_passage_with(sys, cfg, x0, plane, &mut replicate_rng(cfg.seed, k))
}

/// `cfg.n_samples` independent first passages from the same start.
pub fn sample_passages(sys: &FilippovSde, cfg: &SimConfig, x0: &[f64], plane: &Plane) -> Result<Vec<PassageSample>> {
    cfg.validate()?;
    par_replicates(cfg.n_samples, |k| first_passage(sys, cfg, x0, plane, k)).into_iter().collect()
}

/// How qualifying returns to the manifold are recognised along one long path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnProtocol {
    /// An excursion with `x₁ > 0` qualifies once `x₂ > δ⁺`; it ends at the first crossing
    /// of the manifold into the stable sliding region.
    pub delta_plus: f64,
    /// Centre `q` of the point symmetry `x ↦ 2q − x`; enables left returns and half periods.
    pub mirror_center: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillationRun {
    pub t_osc: Vec<f64>,
    pub t_half: Vec<f64>,
    /// Fewer oscillations than requested were completed.
    pub partial: bool,
}

/// Simulates one long path from `x0` and records `n_osc` oscillation times after burn-in.
pub fn oscillation_times(
    sys: &FilippovSde,
    cfg: &SimConfig,
    x0: &[f64],
    protocol: &ReturnProtocol,
    n_osc: usize,
) -> Result<OscillationRun> {
    cfg.validate()?;
    let mut rng = replicate_rng(cfg.seed, 0);
    let mut em = EmScheme::new(sys, cfg.eps, cfg.dt);
    let mut x = x0.to_vec();
    let mut prev = x.clone();
    let mut t = 0.0;
    let (mut armed_r, mut armed_l) = (false, false);
    // (time, is_right) of qualifying returns
    let mut events: Vec<(f64, bool)> = Vec::new();
    let mut right_count = 0usize;
    let needed = cfg.burn_in_oscillations + n_osc + 1;
    let q2 = protocol.mirror_center.as_ref().map(|q| q[1]);
    let mut steps = 0u64;
    while right_count < needed && steps < cfg.max_steps {
        prev.copy_from_slice(&x);
        em.step(&mut x, &mut rng);
        steps += 1;
        if x[0] > 0.0 && x[1] > protocol.delta_plus {
            armed_r = true;
        }
        if let Some(q2) = q2 {
            if x[0] < 0.0 && 2.0 * q2 - x[1] > protocol.delta_plus {
                armed_l = true;
            }
        }
        let cross_time = |th: f64| t + th * cfg.dt;
        // only a crossing into the stable sliding region ends an excursion; touches in the
        // crossing region (right after escape, or a grazing end of the regular phase) do not
        let lands_sliding = |th: f64| {
            let y: Vec<f64> = (1..x.len()).map(|i| prev[i] + th * (x[i] - prev[i])).collect();
            sys.sliding_coeffs(&y).in_stable_region()
        };
        if armed_r && prev[0] > 0.0 && x[0] <= 0.0 {
            let th = prev[0] / (prev[0] - x[0]);
            if lands_sliding(th) {
                events.push((cross_time(th), true));
                armed_r = false;
                right_count += 1;
            }
        } else if armed_l && prev[0] < 0.0 && x[0] >= 0.0 {
            let th = prev[0] / (prev[0] - x[0]);
            if lands_sliding(th) {
                events.push((cross_time(th), false));
                armed_l = false;
            }
        }
        t += cfg.dt;
    }
    let rights: Vec<usize> = events.iter().enumerate().filter(|(_, e)| e.1).map(|(i, _)| i).collect();
    let start = cfg.burn_in_oscillations.min(rights.len().saturating_sub(1));
    let mut t_osc = Vec::new();
    let mut t_half = Vec::new();
    if rights.len() > start + 1 {
        for w in rights[start..].windows(2) {
            t_osc.push(events[w[1]].0 - events[w[0]].0);
        }
        if q2.is_some() {
            let (lo, hi) = (rights[start], *rights.last().unwrap());
            for i in lo..hi {
                t_half.push(events[i + 1].0 - events[i].0);
            }
        }
    }
    t_osc.truncate(n_osc);
    t_half.truncate(2 * n_osc);
    let partial = t_osc.len() < n_osc;
    Ok(OscillationRun { t_osc, t_half, partial })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filippov::AffineField;
    use nalgebra::{DMatrix, DVector};
    use std::sync::Arc;

    fn ou(n: usize) -> FilippovSde {
        let a = -DMatrix::<f64>::identity(n, n);
        let z = DVector::zeros(n);
        let f = AffineField::new(a.clone(), z.clone(), a, z).unwrap();
        FilippovSde::new(Arc::new(f), DMatrix::identity(n, n)).unwrap()
    }

    #[test]
    fn deterministic_limit_of_em() {
        let sys = ou(2);
        let mut x = vec![1.0, -1.0];
        let dt = 1e-4;
        for _ in 0..10_000 {
            x = em_step(&sys, &x, dt, 0.0, &[0.3, 0.3]);
        }
        assert!((x[0] - (-1f64).exp()).abs() < 1e-4);
    }

    #[test]
    fn em_step_matches_scheme() {
        let sys = ou(2);
        let mut em = EmScheme::new(&sys, 0.04, 0.01);
        let mut x = vec![0.5, -0.2];
        em.step_with(&mut x, &[1.0, -2.0]);
        let y = em_step(&sys, &[0.5, -0.2], 0.01, 0.04, &[1.0, -2.0]);
        assert!((x[0] - y[0]).abs() < 1e-15 && (x[1] - y[1]).abs() < 1e-15);
    }

    #[test]
    fn zero_columns_are_skipped() {
        let mut sys = ou(3);
        let mut d = DMatrix::zeros(3, 3);
        d[(0, 0)] = 1.0;
        d[(2, 0)] = 0.5;
        sys = sys.with_diffusion(d).unwrap();
        assert_eq!(EmScheme::new(&sys, 1e-3, 1e-3).noise_dim(), 1);
        assert_eq!(EmScheme::new(&sys, 0.0, 1e-3).noise_dim(), 0);
    }

    #[test]
    fn replicate_streams_differ_and_repeat() {
        use rand::Rng;
        let a: u64 = replicate_rng(7, 0).random();
        let b: u64 = replicate_rng(7, 1).random();
        let c: u64 = replicate_rng(7, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn crossing_directions() {
        let up = Plane { index: 0, level: 0.0, direction: Direction::Up };
        assert!(up.crossed(-1.0, 0.0) && !up.crossed(1.0, -1.0));
        let down = Plane { direction: Direction::Down, ..up };
        assert!(down.crossed(1.0, -1.0) && !down.crossed(-1.0, 1.0));
    }

    #[test]
    fn passage_budget_is_enforced() {
        let sys = ou(2);
        let cfg = SimConfig { eps: 0.0, dt: 1e-3, max_steps: 10, ..Default::default() };
        let plane = Plane { index: 0, level: 5.0, direction: Direction::Up };
        assert!(matches!(first_passage(&sys, &cfg, &[0.0, 0.0], &plane, 0), Err(Error::PassageNotReached { .. })));
    }
}
