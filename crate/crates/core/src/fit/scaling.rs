//! Linear trends of fitted coefficients against model or workload size, with
//! leave-n-out cross-validation.

use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Subset count above which leave-n-out samples instead of enumerating.
pub const MAX_SUBSETS: usize = 10_000;
const SUBSET_SEED: u64 = 0x5eed_1ea7_e0a7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    VerifierParams,
    DrafterParams,
    PrefillTokens,
    EffectiveTokens,
}

impl Predictor {
    pub fn as_str(&self) -> &'static str {
        match self {
            Predictor::VerifierParams => "verifier_params",
            Predictor::DrafterParams => "drafter_params",
            Predictor::PrefillTokens => "prefill_tokens",
            Predictor::EffectiveTokens => "effective_tokens",
        }
    }
}

impl fmt::Display for Predictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Predictor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verifier_params" => Ok(Predictor::VerifierParams),
            "drafter_params" => Ok(Predictor::DrafterParams),
            "prefill_tokens" => Ok(Predictor::PrefillTokens),
            "effective_tokens" => Ok(Predictor::EffectiveTokens),
            other => Err(Error::Validation(format!(
                "unknown predictor '{other}' (expected verifier_params, drafter_params, \
                 prefill_tokens or effective_tokens)"
            ))),
        }
    }
}

/// `coefficient ≈ slope * predictor + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingTrend {
    pub slope: f64,
    pub intercept: f64,
    pub predictor: Predictor,
    pub r2: f64,
}

impl ScalingTrend {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// Prefill tokens plus half the decode tokens: the average context length a
/// decode step attends over.
pub fn effective_token_count(prefill: f64, decode: f64) -> f64 {
    prefill + 0.5 * decode
}

/// Ordinary least-squares line through `(predictor, coefficient)` pairs.
pub fn fit_scaling_trend(points: &[(f64, f64)], predictor: Predictor) -> Result<ScalingTrend> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "a trend line needs at least 2 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Validation("trend points must be finite".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate(format!(
            "all {predictor} values are equal, so no slope can be fitted"
        )));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.1 - slope * p.0 - intercept).powi(2))
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(ScalingTrend {
        slope,
        intercept,
        predictor,
        r2,
    })
}

/// Held-out accuracy of the trend over all (or sampled) size-`n` holdouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaveNOutSummary {
    pub n: usize,
    pub folds: usize,
    /// Whether folds were sampled rather than enumerated.
    pub sampled: bool,
    /// r² over the held-out predictions of every fold pooled together.
    pub pooled_r2: f64,
    /// Per-fold r², each measured against the full-data mean.
    pub mean_fold_r2: f64,
    pub min_fold_r2: f64,
    /// r² of the trend fitted to all configs.
    pub full_r2: f64,
}

fn binomial(n: usize, k: usize) -> Option<usize> {
    let k = k.min(n - k);
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

fn holdouts(count: usize, n: usize) -> (Vec<Vec<usize>>, bool) {
    match binomial(count, n) {
        Some(total) if total <= MAX_SUBSETS => ((0..count).combinations(n).collect(), false),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(SUBSET_SEED);
            let subsets = (0..MAX_SUBSETS)
                .map(|_| {
                    let mut idx = rand::seq::index::sample(&mut rng, count, n).into_vec();
                    idx.sort_unstable();
                    idx
                })
                .collect();
            (subsets, true)
        }
    }
}

/// Fits the trend on all configs but `n`, predicts the held-out ones, and
/// summarizes predictive r² across every holdout.
pub fn leave_n_out(points: &[(f64, f64)], n: usize, predictor: Predictor) -> Result<LeaveNOutSummary> {
    if n == 0 {
        return Err(Error::Validation("leave-n-out needs n >= 1".into()));
    }
    if points.len() < n + 2 {
        return Err(Error::InsufficientData(format!(
            "leaving {n} out of {} configs leaves fewer than 2 to fit",
            points.len()
        )));
    }
    let full = fit_scaling_trend(points, predictor)?;
    let mean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let (subsets, sampled) = holdouts(points.len(), n);

    let mut pooled_res = 0.0;
    let mut pooled: Vec<f64> = Vec::with_capacity(subsets.len() * n);
    let mut fold_r2 = Vec::with_capacity(subsets.len());
    let mut folds = 0;
    let mut train = Vec::with_capacity(points.len());
    for held in &subsets {
        train.clear();
        let mut h = held.iter().peekable();
        for (i, p) in points.iter().enumerate() {
            if h.peek() == Some(&&i) {
                h.next();
            } else {
                train.push(*p);
            }
        }
        let trend = match fit_scaling_trend(&train, predictor) {
            Ok(t) => t,
            // A training set with one distinct predictor value cannot fit a
            // slope; that holdout is uninformative and skipped.
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        };
        let mut res = 0.0;
        let mut tot = 0.0;
        for &i in held {
            let (x, y) = points[i];
            res += (y - trend.predict(x)).powi(2);
            tot += (y - mean).powi(2);
            pooled.push(y);
        }
        pooled_res += res;
        folds += 1;
        if tot > 0.0 {
            fold_r2.push(1.0 - res / tot);
        }
    }
    if pooled.is_empty() {
        return Err(Error::InsufficientData(
            "every holdout left a training set with a single predictor value".into(),
        ));
    }
    let pooled_mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
    let pooled_tot: f64 = pooled.iter().map(|y| (y - pooled_mean).powi(2)).sum();
    let pooled_r2 = if pooled_tot > 0.0 {
        1.0 - pooled_res / pooled_tot
    } else if pooled_res == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    let (mean_fold_r2, min_fold_r2) = if fold_r2.is_empty() {
        (pooled_r2, pooled_r2)
    } else {
        (
            fold_r2.iter().sum::<f64>() / fold_r2.len() as f64,
            fold_r2.iter().copied().fold(f64::INFINITY, f64::min),
        )
    };
    Ok(LeaveNOutSummary {
        n,
        folds,
        sampled,
        pooled_r2,
        mean_fold_r2,
        min_fold_r2,
        full_r2: full.r2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn linear(count: usize) -> Vec<(f64, f64)> {
        (0..count).map(|i| (i as f64 * 100.0, 3e-5 * i as f64 * 100.0 + 0.01)).collect()
    }

    #[test]
    fn effective_tokens() {
        assert_eq!(effective_token_count(1024.0, 1024.0), 1536.0);
        assert_eq!(effective_token_count(0.0, 300.0), 150.0);
        assert_eq!(effective_token_count(256.0, 512.0), 512.0);
    }

    #[test]
    fn line_through_points() {
        let t = fit_scaling_trend(&[(1.0, 2.0), (2.0, 4.0), (3.0, 6.0)], Predictor::VerifierParams)
            .unwrap();
        assert_relative_eq!(t.slope, 2.0, epsilon = 1e-12);
        assert!(t.intercept.abs() < 1e-12);
        assert_eq!(t.r2, 1.0);
    }

    #[test]
    fn trend_errors() {
        assert!(matches!(
            fit_scaling_trend(&[(1.0, 2.0), (1.0, 3.0)], Predictor::PrefillTokens),
            Err(Error::Degenerate(_))
        ));
        assert!(fit_scaling_trend(&[(1.0, 2.0)], Predictor::PrefillTokens).is_err());
    }

    #[test]
    fn slope_recovered_from_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.002).unwrap();
        let mut pts = Vec::new();
        for p in [128.0, 256.0, 512.0, 1024.0] {
            for d in [128.0, 256.0, 512.0, 1024.0] {
                let x = effective_token_count(p, d);
                pts.push((x, (2e-7 * x + 1e-4) * (1.0 + noise.sample(&mut rng))));
            }
        }
        let t = fit_scaling_trend(&pts, Predictor::EffectiveTokens).unwrap();
        assert!((t.slope / 2e-7 - 1.0).abs() < 0.01, "slope {}", t.slope);
    }

    #[test]
    fn exact_line_predicts_perfectly() {
        let pts = linear(16);
        for n in [1, 2, 4] {
            let s = leave_n_out(&pts, n, Predictor::EffectiveTokens).unwrap();
            assert_relative_eq!(s.pooled_r2, 1.0, epsilon = 1e-9);
            assert_relative_eq!(s.min_fold_r2, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn fold_counts() {
        let pts = linear(16);
        let s = leave_n_out(&pts, 1, Predictor::EffectiveTokens).unwrap();
        assert_eq!(s.folds, 16);
        assert!(!s.sampled);
        assert_eq!(leave_n_out(&pts, 2, Predictor::EffectiveTokens).unwrap().folds, 120);
        let big = linear(40);
        let s = leave_n_out(&big, 5, Predictor::EffectiveTokens).unwrap();
        assert!(s.sampled);
        assert_eq!(s.folds, MAX_SUBSETS);
    }

    #[test]
    fn too_few_configs() {
        let pts = linear(4);
        assert!(matches!(
            leave_n_out(&pts, 3, Predictor::PrefillTokens),
            Err(Error::InsufficientData(_))
        ));
        assert!(leave_n_out(&pts, 2, Predictor::PrefillTokens).is_ok());
    }

    #[test]
    fn held_out_never_exceeds_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<(f64, f64)> = (0..8)
            .map(|i| (i as f64, rng.random_range(0.0..1.0)))
            .collect();
        for n in 1..=6 {
            let s = leave_n_out(&pts, n, Predictor::DrafterParams).unwrap();
            assert!(s.pooled_r2 <= 1.0 && s.mean_fold_r2 <= 1.0);
        }
    }
}
