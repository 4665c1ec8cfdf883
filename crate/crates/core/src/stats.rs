//! Bootstrap uncertainty estimates and dependency testing on deviation series.
//!
//! Resampling protocol (relied on by reproducibility checks): the generator is
//! `rng::stream(seed)`; for each of the `B` resamples, `n` indices are drawn
//! in order with `random_range(0..n as u64)`. Each resample contributes the
//! mean of absolute deviations and the signed mean of the drawn values. Both
//! lists are returned sorted ascending.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conservation::DeviationSeries;
use crate::rng;

pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_PERMUTATIONS: usize = 2_000;
pub const DEFAULT_CONFIDENCE: f64 = 0.95;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const MIN_DEPENDENCY_SAMPLES: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("deviation series is empty")]
    EmptySeries,
    #[error("resample count must be at least 1")]
    ZeroResamples,
    #[error("confidence {0} outside (0, 1)")]
    InvalidConfidence(f64),
    #[error("significance level {0} outside (0, 1)")]
    InvalidAlpha(f64),
    #[error("operating range must be positive, got {0}")]
    InvalidRange(f64),
    #[error("series contains non-finite values")]
    NonFinite,
    #[error("unknown covariate '{0}'")]
    UnknownCovariate(String),
    #[error("too few samples: need {needed}, found {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("covariate '{0}' is constant; correlation undefined")]
    DegenerateCovariate(String),
    #[error("absolute deviations are constant; correlation undefined")]
    DegenerateDeviations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Sorted means of absolute deviations, one per resample.
    pub resample_means: Vec<f64>,
    /// Sorted signed means, one per resample.
    pub signed_means: Vec<f64>,
    /// Mean absolute deviation of the original series.
    pub point_estimate: f64,
    pub signed_point_estimate: f64,
    /// Sample standard deviation of `resample_means`.
    pub standard_error: f64,
    pub seed: u64,
    pub resamples: usize,
    pub n: usize,
}

impl BootstrapResult {
    pub fn quantile(&self, p: f64) -> f64 {
        nearest_rank(&self.resample_means, p)
    }

    /// Central percentile interval of the signed-mean bootstrap.
    pub fn signed_interval(&self, confidence: f64) -> (f64, f64) {
        central_interval(&self.signed_means, confidence)
    }
}

/// Nearest-rank quantile of a sorted slice: the value at rank `ceil(p * len)`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let len = sorted.len();
    // 0.95 * 10000 must land on rank 9500, not 9501.
    let rank = (p * len as f64 - 1e-9).ceil().clamp(1.0, len as f64) as usize;
    sorted[rank - 1]
}

fn central_interval(sorted: &[f64], confidence: f64) -> (f64, f64) {
    let tail = (1.0 - confidence) / 2.0;
    (nearest_rank(sorted, tail), nearest_rank(sorted, 1.0 - tail))
}

pub fn bootstrap(
    series: &DeviationSeries,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult, StatsError> {
    bootstrap_values(&series.values, resamples, seed)
}

/// Bootstraps the mean absolute deviation of `values`.
pub fn bootstrap_values(
    values: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptySeries);
    }
    if resamples == 0 {
        return Err(StatsError::ZeroResamples);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let n = values.len();
    let inv_n = 1.0 / n as f64;
    let mut rng = rng::stream(seed);
    let mut resample_means = Vec::with_capacity(resamples);
    let mut signed_means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let (mut abs_sum, mut sum) = (0.0, 0.0);
        for _ in 0..n {
            let v = values[rng.random_range(0..n as u64) as usize];
            abs_sum += v.abs();
            sum += v;
        }
        resample_means.push(abs_sum * inv_n);
        signed_means.push(sum * inv_n);
    }
    resample_means.sort_by(f64::total_cmp);
    signed_means.sort_by(f64::total_cmp);

    let mean = resample_means.iter().sum::<f64>() / resamples as f64;
    let standard_error = if resamples > 1 {
        let ss: f64 = resample_means.iter().map(|m| (m - mean).powi(2)).sum();
        (ss / (resamples - 1) as f64).sqrt()
    } else {
        0.0
    };

    Ok(BootstrapResult {
        resample_means,
        signed_means,
        point_estimate: values.iter().map(|v| v.abs()).sum::<f64>() * inv_n,
        signed_point_estimate: values.iter().sum::<f64>() * inv_n,
        standard_error,
        seed,
        resamples,
        n,
    })
}

/// An uncertainty `u` at a confidence level, in the units of the deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEstimate {
    pub spec_id: String,
    pub window_id: u64,
    pub u: f64,
    pub confidence: f64,
    pub interval: (f64, f64),
    pub point_estimate: f64,
    /// `u / operating_range` when a range is known.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub relative: Option<f64>,
}

impl UncertaintyEstimate {
    pub fn labelled(mut self, spec_id: impl Into<String>, window_id: u64) -> Self {
        self.spec_id = spec_id.into();
        self.window_id = window_id;
        self
    }
}

/// `u` is the one-sided upper `confidence` quantile of the bootstrapped mean
/// absolute deviation; `interval` is the central percentile interval.
pub fn uncertainty_at(
    result: &BootstrapResult,
    confidence: f64,
    range: Option<f64>,
) -> Result<UncertaintyEstimate, StatsError> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(StatsError::InvalidConfidence(confidence));
    }
    if let Some(r) = range {
        if !(r > 0.0 && r.is_finite()) {
            return Err(StatsError::InvalidRange(r));
        }
    }
    let u = result.quantile(confidence);
    Ok(UncertaintyEstimate {
        spec_id: String::new(),
        window_id: 0,
        u,
        confidence,
        interval: central_interval(&result.resample_means, confidence),
        point_estimate: result.point_estimate,
        relative: range.map(|r| u / r),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisResult {
    pub covariate: String,
    /// Pearson r between |deviation| and the covariate.
    pub statistic: f64,
    pub p_value: f64,
    pub alpha: f64,
    pub rejected: bool,
    pub permutations: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyReport {
    pub covariate: String,
    pub covariance: f64,
    pub pearson_r: f64,
    pub n: usize,
}

/// Centered |deviation| and covariate vectors plus their sums of squares.
struct Centered {
    x: Vec<f64>,
    y: Vec<f64>,
    sxx: f64,
    syy: f64,
}

fn centered(series: &DeviationSeries, covariate: &str) -> Result<Centered, StatsError> {
    let cov = series
        .covariates
        .get(covariate)
        .ok_or_else(|| StatsError::UnknownCovariate(covariate.to_string()))?;
    let n = series.len();
    if n < MIN_DEPENDENCY_SAMPLES {
        return Err(StatsError::TooFewSamples {
            needed: MIN_DEPENDENCY_SAMPLES,
            found: n,
        });
    }
    debug_assert_eq!(cov.len(), n);
    let abs = series.abs_values();
    if abs.iter().chain(cov).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    if cov.iter().all(|&c| c == cov[0]) {
        return Err(StatsError::DegenerateCovariate(covariate.to_string()));
    }
    if abs.iter().all(|&a| a == abs[0]) {
        return Err(StatsError::DegenerateDeviations);
    }
    let mx = abs.iter().sum::<f64>() / n as f64;
    let my = cov.iter().sum::<f64>() / n as f64;
    let x: Vec<f64> = abs.iter().map(|a| a - mx).collect();
    let y: Vec<f64> = cov.iter().map(|c| c - my).collect();
    let sxx = x.iter().map(|v| v * v).sum();
    let syy = y.iter().map(|v| v * v).sum();
    Ok(Centered { x, y, sxx, syy })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Covariance and Pearson correlation of (|deviation|, covariate).
pub fn dependency_report(
    series: &DeviationSeries,
    covariate: &str,
) -> Result<DependencyReport, StatsError> {
    let c = centered(series, covariate)?;
    let sxy = dot(&c.x, &c.y);
    let n = c.x.len();
    Ok(DependencyReport {
        covariate: covariate.to_string(),
        covariance: sxy / (n - 1) as f64,
        pearson_r: (sxy / (c.sxx * c.syy).sqrt()).clamp(-1.0, 1.0),
        n,
    })
}

/// One-sided permutation test of H0 "|deviation| does not increase with the
/// covariate".
///
/// The covariate is shuffled `permutations` times; the p-value is
/// `(k + 1) / (permutations + 1)` where `k` counts shuffles whose correlation
/// is at least the observed one.
pub fn test_dependency(
    series: &DeviationSeries,
    covariate: &str,
    alpha: f64,
    permutations: usize,
    seed: u64,
) -> Result<HypothesisResult, StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::InvalidAlpha(alpha));
    }
    let Centered { x, mut y, sxx, syy } = centered(series, covariate)?;
    let scale = (sxx * syy).sqrt();
    let observed = dot(&x, &y);
    // Ties within rounding count as at least as extreme.
    let threshold = observed - 1e-12 * scale;

    let mut rng = rng::stream(seed);
    let mut extreme = 0usize;
    for _ in 0..permutations {
        y.shuffle(&mut rng);
        if dot(&x, &y) >= threshold {
            extreme += 1;
        }
    }
    let p_value = (extreme + 1) as f64 / (permutations + 1) as f64;
    Ok(HypothesisResult {
        covariate: covariate.to_string(),
        statistic: (observed / scale).clamp(-1.0, 1.0),
        p_value,
        alpha,
        rejected: p_value < alpha,
        permutations,
        n: x.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn series(values: Vec<f64>) -> DeviationSeries {
        DeviationSeries {
            spec_id: "s".into(),
            timestamps: (0..values.len()).map(|i| i as f64).collect(),
            targets: vec![0; values.len()],
            values,
            ..Default::default()
        }
    }

    fn with_covariate(values: Vec<f64>, cov: Vec<f64>) -> DeviationSeries {
        let mut s = series(values);
        s.covariates.insert("velocity".into(), cov);
        s
    }

    /// Independent re-implementation of the documented resampling protocol.
    fn brute_force_bootstrap(values: &[f64], b: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = values.len();
        let mut means: Vec<f64> = (0..b)
            .map(|_| {
                let drawn: Vec<f64> = (0..n)
                    .map(|_| values[rng.random_range(0..n as u64) as usize].abs())
                    .collect();
                drawn.iter().sum::<f64>() / n as f64
            })
            .collect();
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        means
    }

    #[test]
    fn all_zero_series() {
        let r = bootstrap(&series(vec![0.0; 20]), 100, 1).unwrap();
        assert!(r.resample_means.iter().all(|m| *m == 0.0));
        assert_eq!(r.standard_error, 0.0);
        let u = uncertainty_at(&r, 0.95, None).unwrap();
        assert_eq!(u.u, 0.0);
        assert_eq!(u.interval, (0.0, 0.0));
    }

    #[test]
    fn singleton_series() {
        let r = bootstrap(&series(vec![0.004]), 10, 5).unwrap();
        assert_eq!(r.resample_means, vec![0.004; 10]);
        assert_eq!(r.resamples, 10);
    }

    #[test]
    fn errors() {
        assert_eq!(bootstrap(&series(vec![]), 10, 0), Err(StatsError::EmptySeries));
        assert_eq!(bootstrap(&series(vec![1.0]), 0, 0), Err(StatsError::ZeroResamples));
        let r = bootstrap(&series(vec![1.0, 2.0]), 10, 0).unwrap();
        assert_eq!(uncertainty_at(&r, 1.0, None), Err(StatsError::InvalidConfidence(1.0)));
        assert_eq!(uncertainty_at(&r, 0.0, None), Err(StatsError::InvalidConfidence(0.0)));
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let normal = Normal::new(0.0, 0.002).unwrap();
        let values: Vec<f64> = (0..100).map(|_| normal.sample(&mut rng)).collect();
        let r = bootstrap(&series(values.clone()), 2000, 123).unwrap();
        let oracle = brute_force_bootstrap(&values, 2000, 123);
        for (a, b) in r.resample_means.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1e-3));
        }

        // SE of the mean of |dev| is close to std(|dev|) / sqrt(n).
        let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
        let m = abs.iter().sum::<f64>() / 100.0;
        let sd = (abs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 99.0).sqrt();
        let expected = sd / 10.0;
        assert!((r.standard_error - expected).abs() / expected < 0.1);
    }

    #[test]
    fn nearest_rank_rule() {
        // Sorted 10000 seeded draws; the 95% quantile is the 9500th order statistic.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut draws: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        draws.sort_by(f64::total_cmp);
        assert_eq!(nearest_rank(&draws, 0.95), draws[9499]);
        assert_eq!(nearest_rank(&draws, 0.99), draws[9899]);
        assert_eq!(nearest_rank(&draws, 0.025), draws[249]);
        assert_eq!(nearest_rank(&draws, 0.975), draws[9749]);
        assert_eq!(nearest_rank(&[1.0, 2.0], 0.5), 1.0);
        assert_eq!(nearest_rank(&[1.0, 2.0], 0.51), 2.0);
    }

    #[test]
    fn relative_uncertainty() {
        let r = BootstrapResult {
            resample_means: vec![0.0038; 10],
            signed_means: vec![0.0; 10],
            point_estimate: 0.0038,
            signed_point_estimate: 0.0,
            standard_error: 0.0,
            seed: 0,
            resamples: 10,
            n: 1,
        };
        let u = uncertainty_at(&r, 0.95, Some(4.0)).unwrap();
        assert!((u.relative.unwrap() - 0.00095).abs() < 1e-15);
        assert_eq!(uncertainty_at(&r, 0.95, Some(0.0)), Err(StatsError::InvalidRange(0.0)));
    }

    #[test]
    fn perfect_association_is_rejected() {
        let xi: Vec<f64> = (1..=50).map(|i| i as f64 * 0.05).collect();
        let dev: Vec<f64> = xi.iter().enumerate().map(|(i, x)| if i % 2 == 0 { 0.01 * x } else { -0.01 * x }).collect();
        let h = test_dependency(&with_covariate(dev, xi), "velocity", 0.05, 2000, 9).unwrap();
        assert!(h.p_value <= 1.0 / 2000.0);
        assert!(h.rejected);
        assert!((h.statistic - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_covariate_is_degenerate() {
        let s = with_covariate(vec![0.1, 0.2, 0.3, 0.4, 0.5], vec![1.0; 5]);
        assert_eq!(
            test_dependency(&s, "velocity", 0.05, 100, 0),
            Err(StatsError::DegenerateCovariate("velocity".into()))
        );
        assert!(matches!(dependency_report(&s, "velocity"), Err(StatsError::DegenerateCovariate(_))));
    }

    #[test]
    fn dependency_errors() {
        let s = with_covariate(vec![0.1, 0.2, 0.3, 0.4], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            test_dependency(&s, "velocity", 0.05, 100, 0),
            Err(StatsError::TooFewSamples { needed: 5, found: 4 })
        );
        assert_eq!(
            test_dependency(&s, "speed", 0.05, 100, 0),
            Err(StatsError::UnknownCovariate("speed".into()))
        );
        let flat = with_covariate(vec![0.1, -0.1, 0.1, 0.1, -0.1], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(dependency_report(&flat, "velocity"), Err(StatsError::DegenerateDeviations));
    }

    #[test]
    fn dependency_report_extremes() {
        let xi: Vec<f64> = (0..20).map(|i| 0.1 * i as f64).collect();
        let dev: Vec<f64> = xi.iter().map(|x| 2.0 * x).collect();
        let d = dependency_report(&with_covariate(dev, xi.clone()), "velocity").unwrap();
        assert!((d.pearson_r - 1.0).abs() < 1e-12);
        assert!(d.covariance > 0.0);

        let dev: Vec<f64> = xi.iter().map(|x| 5.0 - x).collect();
        let d = dependency_report(&with_covariate(dev, xi), "velocity").unwrap();
        assert!((d.pearson_r + 1.0).abs() < 1e-12);
        assert!(d.covariance < 0.0);
    }

    #[test]
    fn injected_correlation_is_recovered() {
        // |dev| and xi built from a bivariate normal with correlation 0.32.
        let rho: f64 = 0.32;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut dev = Vec::with_capacity(1000);
        let mut xi = Vec::with_capacity(1000);
        for i in 0..1000 {
            let z1: f64 = normal.sample(&mut rng);
            let z2: f64 = normal.sample(&mut rng);
            let a = 1.0 + rho * z1 + (1.0 - rho * rho).sqrt() * z2;
            // Sign alternation leaves |dev| = a, which stays positive here.
            dev.push(if i % 2 == 0 { 10.0 + a } else { -(10.0 + a) });
            xi.push(z1);
        }
        let d = dependency_report(&with_covariate(dev, xi), "velocity").unwrap();
        assert!((d.pearson_r - rho).abs() < 0.1, "r = {}", d.pearson_r);
    }

    #[test]
    fn null_rejection_rate_is_calibrated() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let trials = 1000;
        let mut rejected = 0;
        for t in 0..trials {
            let dev: Vec<f64> = (0..30).map(|_| normal.sample(&mut rng)).collect();
            let xi: Vec<f64> = (0..30).map(|_| normal.sample(&mut rng)).collect();
            let h = test_dependency(&with_covariate(dev, xi), "velocity", 0.05, 500, t).unwrap();
            rejected += h.rejected as usize;
        }
        let rate = rejected as f64 / trials as f64;
        assert!((0.03..=0.07).contains(&rate), "rate = {rate}");
    }

    #[test]
    fn deterministic_given_seed() {
        let s = with_covariate(
            vec![0.1, -0.3, 0.2, 0.5, -0.4, 0.25],
            vec![0.3, 1.0, 0.5, 1.8, 1.1, 0.4],
        );
        let a = test_dependency(&s, "velocity", 0.05, 300, 17).unwrap();
        let b = test_dependency(&s, "velocity", 0.05, 300, 17).unwrap();
        assert_eq!(a, b);
        let a = bootstrap(&s, 300, 17).unwrap();
        let b = bootstrap(&s, 300, 17).unwrap();
        assert_eq!(a, b);
    }
}
