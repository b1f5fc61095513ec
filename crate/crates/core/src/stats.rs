//! Small statistics helpers for reports and acceptance checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn std_error(xs: &[f64]) -> f64 {
    std_dev(xs) / (xs.len() as f64).sqrt()
}

/// Trailing moving average; the first `window - 1` entries average what is
/// available so far.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= window {
            sum -= xs[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Fraction of consecutive steps of `xs` that do not decrease.
pub fn nondecreasing_fraction(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 1.0;
    }
    let ups = xs.windows(2).filter(|w| w[1] >= w[0]).count();
    ups as f64 / (xs.len() - 1) as f64
}

/// Fraction of the length-`window` windows of `xs` whose mean is at least
/// the previous window's mean. Windows are non-overlapping blocks.
pub fn block_trend_fraction(xs: &[f64], window: usize) -> f64 {
    let window = window.max(1);
    let blocks: Vec<f64> = xs.chunks_exact(window).map(mean).collect();
    nondecreasing_fraction(&blocks)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub resamples: usize,
}

impl BootstrapCi {
    pub fn excludes_zero(&self) -> bool {
        self.lo > 0.0 || self.hi < 0.0
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval for the mean of `xs`.
pub fn bootstrap_mean_ci(xs: &[f64], level: f64, resamples: usize, seed: u64) -> BootstrapCi {
    let m = mean(xs);
    if xs.is_empty() || resamples == 0 {
        return BootstrapCi { mean: m, lo: m, hi: m, level, resamples };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = xs.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| xs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    BootstrapCi { mean: m, lo: quantile(&means, tail), hi: quantile(&means, 1.0 - tail), level, resamples }
}

/// Wilson score interval for a binomial proportion at normal quantile `z`.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * ((p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt()) / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_small() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn trend_fractions() {
        assert_eq!(nondecreasing_fraction(&[1.0, 2.0, 2.0, 1.0, 3.0]), 0.75);
        assert_eq!(block_trend_fraction(&[1.0, 1.0, 2.0, 2.0, 0.0, 0.0], 2), 0.5);
    }

    #[test]
    fn bootstrap_brackets_mean_and_repeats() {
        let xs: Vec<f64> = (0..20).map(|i| 1.0 + 0.1 * i as f64).collect();
        let ci = bootstrap_mean_ci(&xs, 0.95, 2000, 9);
        assert!(ci.lo < ci.mean && ci.mean < ci.hi);
        assert!(ci.excludes_zero());
        assert_eq!(ci, bootstrap_mean_ci(&xs, 0.95, 2000, 9));
        let sym = bootstrap_mean_ci(&[-1.0, 1.0, -1.0, 1.0], 0.95, 2000, 1);
        assert!(!sym.excludes_zero());
    }

    #[test]
    fn wilson_is_inside_unit_interval() {
        let (lo, hi) = wilson_interval(95, 100, 1.96);
        assert!(lo > 0.88 && hi < 0.98 && lo < 0.95 && hi > 0.95);
    }
}
