//! Fitting the latency laws to sweep data.

mod latency;
pub mod lm;
mod moe;
pub mod scaling;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatencyColumn, ServingCoefficients};
use crate::moe::{MoeCoefficients, MoeSpecCoefficients};
use crate::spec::SpecCostCoefficients;

pub use latency::{fit_basic, fit_basic_with, fit_spec, fit_spec_with};
pub use lm::{
    least_squares, Bounds, FnModel, GradientContext, LsqSolution, ParametricModel, ResidualMode,
};
pub use moe::{fit_moe, fit_moe_spec, fit_moe_spec_with, fit_moe_with, MULTI_START_FACTORS};
pub use scaling::{
    effective_token_count, fit_scaling_trend, leave_n_out, LeaveNOutSummary, Predictor,
    ScalingTrend,
};

/// A coefficient set with a fixed, named parameter order.
pub trait ParamSet: Sized {
    const NAMES: &'static [&'static str];

    fn to_vec(&self) -> Vec<f64>;

    /// Builds from values in `NAMES` order. Panics on a length mismatch.
    fn from_slice(values: &[f64]) -> Self;
}

impl ParamSet for ServingCoefficients {
    const NAMES: &'static [&'static str] = &["c1", "c2"];

    fn to_vec(&self) -> Vec<f64> {
        vec![self.c1, self.c2]
    }

    fn from_slice(v: &[f64]) -> Self {
        ServingCoefficients { c1: v[0], c2: v[1] }
    }
}

impl ParamSet for SpecCostCoefficients {
    const NAMES: &'static [&'static str] = &["c1p", "c1v", "c1d", "c2p", "c2v", "c2d"];

    fn to_vec(&self) -> Vec<f64> {
        vec![self.c1p, self.c1v, self.c1d, self.c2p, self.c2v, self.c2d]
    }

    fn from_slice(v: &[f64]) -> Self {
        SpecCostCoefficients {
            c1p: v[0],
            c1v: v[1],
            c1d: v[2],
            c2p: v[3],
            c2v: v[4],
            c2d: v[5],
        }
    }
}

impl ParamSet for MoeCoefficients {
    const NAMES: &'static [&'static str] = &["c1u", "c1s", "c2u", "c2s"];

    fn to_vec(&self) -> Vec<f64> {
        vec![self.c1u, self.c1s, self.c2u, self.c2s]
    }

    fn from_slice(v: &[f64]) -> Self {
        MoeCoefficients {
            c1u: v[0],
            c1s: v[1],
            c2u: v[2],
            c2s: v[3],
        }
    }
}

impl ParamSet for MoeSpecCoefficients {
    const NAMES: &'static [&'static str] =
        &["c1p", "c1vu", "c1vs", "c1d", "c2p", "c2vu", "c2vs", "c2d"];

    fn to_vec(&self) -> Vec<f64> {
        vec![
            self.c1p, self.c1vu, self.c1vs, self.c1d, self.c2p, self.c2vu, self.c2vs, self.c2d,
        ]
    }

    fn from_slice(v: &[f64]) -> Self {
        MoeSpecCoefficients {
            c1p: v[0],
            c1vu: v[1],
            c1vs: v[2],
            c1d: v[3],
            c2p: v[4],
            c2vu: v[5],
            c2vs: v[6],
            c2d: v[7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum FitWarning {
    /// The data cannot separate some of the parameters.
    Identifiability(String),
    /// Points flagged as saturated were left out.
    SaturatedPointsExcluded(usize),
}

impl std::fmt::Display for FitWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FitWarning::Identifiability(s) => write!(f, "IdentifiabilityWarning: {s}"),
            FitWarning::SaturatedPointsExcluded(n) => {
                write!(f, "excluded {n} saturated point(s) from the fit")
            }
        }
    }
}

/// Conventions a fit ran under: initialization, bounds and weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub residual_mode: ResidualMode,
    pub init: Vec<f64>,
    pub bounds: Bounds,
    pub starts: usize,
}

/// Fitted parameters with goodness-of-fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult<P> {
    pub params: P,
    pub r2: f64,
    /// Root-mean-square error in seconds.
    pub rmse: f64,
    /// `observed - predicted` per point, in seconds.
    pub residuals: Vec<f64>,
    pub n_points: usize,
    pub converged: bool,
    pub iterations: usize,
    pub latency_column: LatencyColumn,
    pub warnings: Vec<FitWarning>,
    pub metadata: FitMetadata,
}

impl<P: ParamSet> FitResult<P> {
    pub fn named_params(&self) -> Vec<(&'static str, f64)> {
        P::NAMES.iter().copied().zip(self.params.to_vec()).collect()
    }

    pub fn has_identifiability_warning(&self) -> bool {
        self.warnings
            .iter()
            .any(|w| matches!(w, FitWarning::Identifiability(_)))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FitOptions {
    pub residual_mode: ResidualMode,
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    if observed.len() != predicted.len() {
        return Err(Error::Validation(format!(
            "r_squared needs equal lengths ({} vs {})",
            observed.len(),
            predicted.len()
        )));
    }
    if observed.len() < 2 {
        return Err(Error::InsufficientData("r_squared needs at least 2 values".into()));
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let ss_tot: f64 = observed.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate("observed values have zero variance".into()));
    }
    let ss_res: f64 = observed
        .iter()
        .zip(predicted)
        .map(|(y, f)| (y - f).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Builds a [`FitResult`] from observed values and the fitted predictions.
/// Zero-variance observations report `r2 = 1` when the fit is exact and
/// `0` otherwise.
pub(crate) fn summarize<P>(
    params: P,
    observed: &[f64],
    predicted: &[f64],
    solution: &LsqSolution,
    column: LatencyColumn,
    warnings: Vec<FitWarning>,
    metadata: FitMetadata,
) -> FitResult<P> {
    let residuals: Vec<f64> = observed.iter().zip(predicted).map(|(y, f)| y - f).collect();
    let n = observed.len();
    let rmse = (residuals.iter().map(|r| r * r).sum::<f64>() / n as f64).sqrt();
    let r2 = match r_squared(observed, predicted) {
        Ok(v) => v,
        Err(_) if rmse <= 1e-12 * observed.iter().fold(0.0f64, |a, b| a.max(b.abs())) => 1.0,
        Err(_) => 0.0,
    };
    FitResult {
        params,
        r2,
        rmse,
        residuals,
        n_points: n,
        converged: solution.converged,
        iterations: solution.iterations,
        latency_column: column,
        warnings,
        metadata,
    }
}
