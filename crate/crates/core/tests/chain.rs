//! The assembled half-oscillation prediction on the relay model at `ε = 1e-4`.

use fstoch::combine::{
    escape_surrogate, estimate_varrho, predict, regular_stats, sensitivities, sliding_stats, OscillationPrediction,
    PhaseInputs, DIFF_RETAINED, VAR_RETAINED,
};
use fstoch::filippov::{build_relay_model, NoiseSpec, RelayParams};
use fstoch::mc::SimConfig;
use fstoch::regular::RegularTheory;

const EPS: f64 = 1e-4;

fn prediction() -> OscillationPrediction {
    let (m, a) = build_relay_model(RelayParams::default(), -0.1, 0.2).unwrap();
    let sys = m.system(&NoiseSpec::B).unwrap();
    let th = RegularTheory::new(&sys, &a.x_gamma_e, 1e-3).unwrap();
    let sens = sensitivities(&sys, &a, 1e-5).unwrap();
    let mirror = |x: &[f64]| m.mirror(x);
    let varrho = estimate_varrho(&sys, &a, &mirror, &th, 1e-4).unwrap();
    let esc = SimConfig { eps: EPS, dt: 1e-5, seed: 4, n_samples: 400, ..Default::default() };
    let inputs = PhaseInputs {
        regular: regular_stats(&th, EPS).unwrap(),
        sliding: sliding_stats(&sys, &a, EPS, 1e-4).unwrap(),
        escape: escape_surrogate(&sys, &a, &esc).unwrap(),
    };
    predict(&inputs, &sens, varrho, false)
}

#[test]
fn relay_prediction_structure() {
    let p = prediction();

    assert!((p.varrho + 0.68).abs() < 0.05, "varrho {}", p.varrho);
    assert!(p.diff_half < 0.0 && p.std_half > 0.0);

    // the retained variance terms are the three largest
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| p.var.terms[j].abs().total_cmp(&p.var.terms[i].abs()));
    let mut top = order[..3].to_vec();
    top.sort();
    let mut kept = VAR_RETAINED.to_vec();
    kept.sort();
    assert_eq!(top, kept, "{:?}", p.var.terms);

    // for the mean the dropped last term outweighs the retained sliding-time term
    assert!(!DIFF_RETAINED.contains(&8));
    assert!(p.diff.terms[8].abs() > p.diff.terms[0].abs(), "{:?}", p.diff.terms);

    // escape enters through terms 3 and 7 only and stays small
    let escape = p.diff.terms[2].abs() + p.diff.terms[6].abs();
    assert!(escape < 0.05 * p.diff.full.abs(), "{escape} of {}", p.diff.full);
}
