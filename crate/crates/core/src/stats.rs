//! Sample summaries with 95% confidence intervals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959963984540054;

/// Summary of one scalar quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarStats {
    pub n: usize,
    pub mean: f64,
    pub var: f64,
    pub std: f64,
    /// `mean − reference`.
    pub diff: f64,
    /// Half-width of the normal-approximation interval for the mean.
    pub mean_ci: f64,
    /// Chi-square interval for the standard deviation.
    pub std_lo: f64,
    pub std_hi: f64,
}

impl ScalarStats {
    pub fn std_ci_half(&self) -> f64 {
        0.5 * (self.std_hi - self.std_lo)
    }

    /// Whether `d` lies in the interval for `mean − reference`.
    pub fn diff_covers(&self, d: f64) -> bool {
        (d - self.diff).abs() <= self.mean_ci
    }

    pub fn std_covers(&self, s: f64) -> bool {
        s >= self.std_lo && s <= self.std_hi
    }
}

/// Chi-square factors `(√((n−1)/χ²₀.₉₇₅), √((n−1)/χ²₀.₀₂₅))` for the std interval.
pub fn std_ci_factors(n: usize) -> (f64, f64) {
    let k = (n - 1) as f64;
    let chi = ChiSquared::new(k).expect("positive degrees of freedom");
    ((k / chi.inverse_cdf(0.975)).sqrt(), (k / chi.inverse_cdf(0.025)).sqrt())
}

pub fn summarize_scalar(samples: &[f64], reference: f64) -> Result<ScalarStats> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientSamples(n));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let std = var.sqrt();
    let (lo, hi) = std_ci_factors(n);
    Ok(ScalarStats {
        n,
        mean,
        var,
        std,
        diff: mean - reference,
        mean_ci: Z95 * std / nf.sqrt(),
        std_lo: lo * std,
        std_hi: hi * std,
    })
}

/// First-passage sample: time and location at the crossing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageSample {
    pub time: f64,
    pub location: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageStats {
    pub n: usize,
    pub mean_time: f64,
    pub var_time: f64,
    pub diff_time: f64,
    pub std_time: f64,
    pub mean_location: DVector<f64>,
    pub cov_location: DMatrix<f64>,
    pub time: ScalarStats,
    /// Per-component summaries of the location, Diff relative to the reference point.
    pub location: Vec<ScalarStats>,
}

pub fn summarize(samples: &[PassageSample], ref_time: f64, ref_point: &[f64]) -> Result<PassageStats> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientSamples(n));
    }
    let dim = ref_point.len();
    let times: Vec<f64> = samples.iter().map(|s| s.time).collect();
    let time = summarize_scalar(&times, ref_time)?;
    let mut location = Vec::with_capacity(dim);
    for j in 0..dim {
        let col: Vec<f64> = samples.iter().map(|s| s.location[j]).collect();
        location.push(summarize_scalar(&col, ref_point[j])?);
    }
    let mean_location = DVector::from_fn(dim, |j, _| location[j].mean);
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let d = DVector::from_column_slice(&s.location) - &mean_location;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    Ok(PassageStats {
        n,
        mean_time: time.mean,
        var_time: time.var,
        diff_time: time.diff,
        std_time: time.std,
        mean_location,
        cov_location: cov,
        time,
        location,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_samples() {
        let s = summarize_scalar(&[2.5; 10], 2.0).unwrap();
        assert_eq!(s.var, 0.0);
        assert_eq!(s.diff, 0.5);
    }

    #[test]
    fn needs_two_samples() {
        assert_eq!(summarize_scalar(&[1.0], 0.0), Err(Error::InsufficientSamples(1)));
    }

    #[test]
    fn chi_square_factors_bracket_one() {
        let (lo, hi) = std_ci_factors(500);
        assert!(lo < 1.0 && hi > 1.0);
        assert!((lo - 0.9413).abs() < 1e-3 && (hi - 1.0662).abs() < 1e-3);
    }

    #[test]
    fn passage_covariance_is_symmetric() {
        let s: Vec<PassageSample> = (0..5)
            .map(|k| PassageSample { time: k as f64, location: vec![0.0, k as f64, (k * k) as f64] })
            .collect();
        let st = summarize(&s, 2.0, &[0.0, 2.0, 6.0]).unwrap();
        assert_eq!(st.cov_location, st.cov_location.transpose());
        assert_eq!(st.cov_location[(0, 0)], 0.0);
        assert_eq!(st.diff_time, 0.0);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y) - 1.5).abs() < 1e-12);
    }
}
