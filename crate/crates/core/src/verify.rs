//! Probabilistic verification: pooled RMSE, coverage probability, the
//! spread-error correlation, PIT histograms with a chi-square flatness
//! statistic, and moving-block-free bootstrap confidence intervals over
//! temporally thinned forecast samples.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::seed::stream_rng;
use rand::Rng;

/// z-score bracketing the central 90% of a standard normal.
pub const Z_90: f64 = 1.6448536269514722;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("shape mismatch between errors and sigmas")]
    ShapeMismatch,
    #[error("empty verification sample")]
    Empty,
    #[error("metric not applicable: {0}")]
    NotApplicable(&'static str),
}

/// One verified forecast: per-variable errors and predicted standard
/// deviations at a given valid time, plus the valid time in model steps
/// (used for temporal thinning in the bootstrap).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredForecast {
    pub valid_time_steps: usize,
    /// Forecast minus verification target, per state variable.
    pub errors: Vec<f64>,
    /// Predicted standard deviation per state variable.
    pub sigmas: Vec<f64>,
}

impl ScoredForecast {
    fn check(&self) -> Result<(), VerifyError> {
        if self.errors.len() != self.sigmas.len() || self.errors.is_empty() {
            return Err(VerifyError::ShapeMismatch);
        }
        Ok(())
    }
}

fn pool<'a, T: 'a, F: Fn(&'a ScoredForecast) -> &'a [T]>(
    samples: &'a [ScoredForecast],
    f: F,
) -> impl Iterator<Item = &'a T> {
    samples.iter().flat_map(move |s| f(s).iter())
}

/// Root mean squared error pooled over all samples and variables.
pub fn rmse(samples: &[ScoredForecast]) -> Result<f64, VerifyError> {
    if samples.is_empty() {
        return Err(VerifyError::Empty);
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for s in samples {
        s.check()?;
        for e in &s.errors {
            acc += e * e;
            n += 1;
        }
    }
    Ok((acc / n as f64).sqrt())
}

fn z_for_confidence(confidence: f64) -> f64 {
    if (confidence - 0.90).abs() < 1e-12 {
        Z_90
    } else {
        let normal = Normal::new(0.0, 1.0).unwrap();
        normal.inverse_cdf(0.5 + confidence / 2.0)
    }
}

/// Fraction of pooled errors inside +-z * sigma for the central interval at
/// the given confidence (e.g. 0.90).
pub fn coverage_probability(
    samples: &[ScoredForecast],
    confidence: f64,
) -> Result<f64, VerifyError> {
    if samples.is_empty() {
        return Err(VerifyError::Empty);
    }
    let z = z_for_confidence(confidence);
    let mut hits = 0usize;
    let mut n = 0usize;
    for s in samples {
        s.check()?;
        for (e, sg) in s.errors.iter().zip(&s.sigmas) {
            if e.abs() <= z * sg {
                hits += 1;
            }
            n += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Pearson correlation between pooled predicted sigma and pooled absolute
/// error. Constant sigma (e.g. a static baseline) has no defined
/// correlation and yields `NotApplicable`.
pub fn sigma_error_correlation(samples: &[ScoredForecast]) -> Result<f64, VerifyError> {
    if samples.is_empty() {
        return Err(VerifyError::Empty);
    }
    for s in samples {
        s.check()?;
    }
    let xs: Vec<f64> = pool(samples, |s| s.sigmas.as_slice()).copied().collect();
    let ys: Vec<f64> = pool(samples, |s| s.errors.as_slice()).map(|e| e.abs()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(VerifyError::NotApplicable(
            "correlation undefined for constant sigma or constant |error|",
        ));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Probability integral transform histogram: Phi(error / sigma) binned into
/// `n_bins` equal-width bins over [0, 1]. Returns raw counts.
pub fn pit_histogram(samples: &[ScoredForecast], n_bins: usize) -> Result<Vec<usize>, VerifyError> {
    if samples.is_empty() {
        return Err(VerifyError::Empty);
    }
    assert!(n_bins >= 2);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut counts = vec![0usize; n_bins];
    for s in samples {
        s.check()?;
        for (e, sg) in s.errors.iter().zip(&s.sigmas) {
            let u = normal.cdf(e / sg);
            let b = ((u * n_bins as f64) as usize).min(n_bins - 1);
            counts[b] += 1;
        }
    }
    Ok(counts)
}

/// Flatness statistic over histogram counts f_b with M total samples:
/// (N_b / M) * sum_b (f_b - M / N_b)^2. A perfectly flat histogram scores 0;
/// under uniformity the expectation is N_b - 1.
pub fn chi2_flatness(counts: &[usize]) -> f64 {
    let n_bins = counts.len() as f64;
    let m: usize = counts.iter().sum();
    let m = m as f64;
    let expected = m / n_bins;
    counts
        .iter()
        .map(|&c| (c as f64 - expected) * (c as f64 - expected))
        .sum::<f64>()
        * n_bins
        / m
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Minimum valid-time separation (in model steps) between samples entering
/// the bootstrap, to decorrelate the resampled population.
pub const BOOTSTRAP_THIN_STEPS: usize = 20;
pub const BOOTSTRAP_RESAMPLES: usize = 500;

/// Percentile bootstrap confidence interval for a pooled metric.
///
/// Samples are first thinned so consecutive selected valid times are at
/// least [`BOOTSTRAP_THIN_STEPS`] apart, then resampled with replacement
/// [`BOOTSTRAP_RESAMPLES`] times. The interval is widened if necessary so it
/// always brackets the full-sample metric value.
pub fn bootstrap_ci<F>(
    samples: &[ScoredForecast],
    metric: F,
    confidence: f64,
    seed: u64,
) -> Result<ConfidenceInterval, VerifyError>
where
    F: Fn(&[ScoredForecast]) -> Result<f64, VerifyError>,
{
    if samples.is_empty() {
        return Err(VerifyError::Empty);
    }
    let value = metric(samples)?;

    let mut ordered: Vec<&ScoredForecast> = samples.iter().collect();
    ordered.sort_by_key(|s| s.valid_time_steps);
    let mut thinned: Vec<ScoredForecast> = Vec::new();
    let mut last: Option<usize> = None;
    for s in ordered {
        if last.map_or(true, |t| s.valid_time_steps >= t + BOOTSTRAP_THIN_STEPS) {
            thinned.push(s.clone());
            last = Some(s.valid_time_steps);
        }
    }

    let n = thinned.len();
    let mut estimates = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for k in 0..BOOTSTRAP_RESAMPLES {
        let mut rng = stream_rng(seed, "bootstrap", k as u64);
        let resample: Vec<ScoredForecast> =
            (0..n).map(|_| thinned[rng.gen_range(0..n)].clone()).collect();
        if let Ok(est) = metric(&resample) {
            if est.is_finite() {
                estimates.push(est);
            }
        }
    }
    if estimates.is_empty() {
        return Err(VerifyError::Empty);
    }
    estimates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - confidence) / 2.0;
    let idx = |q: f64| {
        (((estimates.len() as f64 - 1.0) * q).round() as usize).min(estimates.len() - 1)
    };
    let lower = estimates[idx(alpha)].min(value);
    let upper = estimates[idx(1.0 - alpha)].max(value);
    Ok(ConfidenceInterval { value, lower, upper })
}

/// Summary report for one forecast system at one lead time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: ConfidenceInterval,
    pub coverage_90: ConfidenceInterval,
    /// `None` when the predicted sigma is constant.
    pub sigma_error_correlation: Option<f64>,
    pub pit_counts: Vec<usize>,
    pub chi2_flatness: f64,
}

/// Compute the full metric suite with bootstrap intervals for RMSE and
/// coverage.
pub fn evaluate(
    samples: &[ScoredForecast],
    n_bins: usize,
    seed: u64,
) -> Result<MetricReport, VerifyError> {
    let rmse_ci = bootstrap_ci(samples, rmse, 0.95, seed)?;
    let cp_ci = bootstrap_ci(samples, |s| coverage_probability(s, 0.90), 0.95, seed)?;
    let corr = match sigma_error_correlation(samples) {
        Ok(c) => Some(c),
        Err(VerifyError::NotApplicable(_)) => None,
        Err(e) => return Err(e),
    };
    let pit = pit_histogram(samples, n_bins)?;
    let chi2 = chi2_flatness(&pit);
    Ok(MetricReport {
        rmse: rmse_ci,
        coverage_90: cp_ci,
        sigma_error_correlation: corr,
        pit_counts: pit,
        chi2_flatness: chi2,
    })
}
