use fstoch::escape::{
    escape_scaling, escape_x1_stats, knessl_pdf, l1_to_histogram, reflected_escape_samples, u_moments, ContourOptions,
};
use fstoch::filippov::{build_relay_model, NoiseSpec, RelayParams};
use fstoch::stats::loglog_slope;

const S_VALUES: [f64; 4] = [-1.0, 0.0, 1.0, 2.0];

fn p(u: f64, s: f64) -> f64 {
    knessl_pdf(u, s).unwrap()
}

/// Fourth-order central first derivative.
fn d1(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
}

fn d2(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x - 2.0 * h) + 16.0 * f(x - h) - 30.0 * f(x) + 16.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h * h)
}

#[test]
fn density_has_unit_mass() {
    for s in S_VALUES {
        let m = u_moments(s, &ContourOptions::default(), 24).unwrap();
        assert!((m.mass - 1.0).abs() < 1e-4, "s = {s}: mass {}", m.mass);
    }
}

#[test]
fn density_solves_forward_equation() {
    // p_s + s p_u − ½p_uu = 0
    let h = 1e-2;
    let mut worst: f64 = 0.0;
    for s in [-1.0, -0.25, 0.5, 1.25, 2.0] {
        for u in [0.05, 0.5, 1.0, 2.0, 3.0, 4.0] {
            let r = d1(|ss| p(u, ss), s, h) + s * d1(|uu| p(uu, s), u, h) - 0.5 * d2(|uu| p(uu, s), u, h);
            worst = worst.max(r.abs());
        }
    }
    assert!(worst < 1e-4, "max residual {worst:e}");
}

#[test]
fn density_has_zero_flux_at_the_wall() {
    let h = 1e-2;
    for s in [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0] {
        let f = |u: f64| p(u, s);
        // one-sided fourth-order derivative at u = 0
        let pu0 = (-25.0 * f(0.0) + 48.0 * f(h) - 36.0 * f(2.0 * h) + 16.0 * f(3.0 * h) - 3.0 * f(4.0 * h)) / (12.0 * h);
        let r = s * f(0.0) - 0.5 * pu0;
        assert!(r.abs() < 1e-3, "s = {s}: boundary residual {r:e}");
    }
}

#[test]
fn density_matches_reflected_sde_histogram() {
    let targets = [0.0, 1.0];
    let samples = reflected_escape_samples(-6.0, &targets, 1e-3, 20_000, 7).unwrap();
    for (k, s) in targets.iter().enumerate() {
        let l1 = l1_to_histogram(&samples[k], 0.1, 8.0, |u| knessl_pdf(u, *s)).unwrap();
        assert!(l1 < 0.05, "s = {s}: L1 {l1}");
    }
}

#[test]
fn x1_spread_at_the_exit_level_scales_as_square_root_of_eps() {
    // s(δ⁺) grows like ε^{-1/3} and Var u ≈ s, which turns the ε^{2/3} scale of x₁ into ε^{1/2}
    let (m, a) = build_relay_model(RelayParams::default(), -0.1, 0.2).unwrap();
    let sc = escape_scaling(&m.system(&NoiseSpec::B).unwrap()).unwrap();
    let eps = [1e-7, 1e-6, 1e-5];
    let std: Vec<f64> = eps
        .iter()
        .map(|&e| escape_x1_stats(&sc, e, a.delta_plus, &ContourOptions::default()).unwrap().std)
        .collect();
    let slope = loglog_slope(&eps, &std);
    assert!((slope - 0.5).abs() < 0.03, "slope {slope}");
}
