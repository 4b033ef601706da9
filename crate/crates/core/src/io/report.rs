//! Plot-ready CSV tables.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::ScalingTrend;
use crate::model::{normalize_point, predict_latency, LoadPoint, ServingCoefficients};
use crate::spec::{cost_ratios, min_cost_ratios_over_k, speedup};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Collapse,
    SpeedupCurve,
    RatioMinima,
    Scaling,
}

impl ReportKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReportKind::Collapse => "collapse",
            ReportKind::SpeedupCurve => "speedup_curve",
            ReportKind::RatioMinima => "ratio_minima",
            ReportKind::Scaling => "scaling",
        }
    }
}

impl fmt::Display for ReportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            ReportKind::Collapse,
            ReportKind::SpeedupCurve,
            ReportKind::RatioMinima,
            ReportKind::Scaling,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| Error::Validation(format!("unknown report kind '{s}'")))
    }
}

/// Normalized load `x = rps * c2` against normalized latency `y = L / c1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseRow {
    pub x: f64,
    pub y: f64,
    pub y_model: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub rps: f64,
    /// Dense utilization `rps * c2`.
    pub r: f64,
    pub speedup_formula: f64,
    pub speedup_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioMinimaRow {
    pub alpha: f64,
    pub min_c1r: f64,
    pub argmin_k_c1r: u32,
    pub min_c2r: f64,
    pub argmin_k_c2r: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub predictor: f64,
    pub coefficient: f64,
    pub fitted_line: f64,
}

/// Collapse of each point onto `y = 1 / (1 - x)` under the given
/// coefficients. Saturated points are left out.
pub fn collapse_report(coeffs: &ServingCoefficients, points: &[LoadPoint]) -> Result<Vec<CollapseRow>> {
    let rows: Vec<CollapseRow> = points
        .iter()
        .filter(|p| !p.saturated)
        .map(|p| {
            let (x, y) = normalize_point(coeffs, p);
            CollapseRow {
                x,
                y,
                y_model: 1.0 / (1.0 - x),
            }
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::MissingInput("collapse report needs at least one load point".into()));
    }
    Ok(rows)
}

/// Speedup along a rate grid, by the closed-form expression and by the ratio
/// of predicted latencies.
pub fn speedup_report(
    dense: &ServingCoefficients,
    sd: &ServingCoefficients,
    rates: &[f64],
) -> Result<Vec<SpeedupRow>> {
    if rates.is_empty() {
        return Err(Error::MissingInput("speedup report needs at least one rate".into()));
    }
    rates
        .iter()
        .map(|&rps| {
            let ratio = predict_latency(dense, rps)? / predict_latency(sd, rps)?;
            Ok(SpeedupRow {
                rps,
                r: rps * dense.c2,
                speedup_formula: speedup(dense, sd, rps)?,
                speedup_ratio: ratio,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadTrend {
    Increases,
    Constant,
    Decreases,
}

impl LoadTrend {
    /// Sign of `1 - C2,R`: below-unity load costs mean speculation gains
    /// ground as load rises.
    pub fn of(dense: &ServingCoefficients, sd: &ServingCoefficients) -> Result<Self> {
        let c2r = cost_ratios(dense, sd)?.c2r;
        Ok(if c2r < 1.0 {
            LoadTrend::Increases
        } else if c2r > 1.0 {
            LoadTrend::Decreases
        } else {
            LoadTrend::Constant
        })
    }

    pub fn summary(&self) -> &'static str {
        match self {
            LoadTrend::Increases => "speedup increases with load",
            LoadTrend::Constant => "speedup is independent of load",
            LoadTrend::Decreases => "speedup decreases with load",
        }
    }
}

/// Minimum cost ratios over draft length for each acceptance rate.
pub fn ratio_minima_report(
    per_alpha: &[(f64, BTreeMap<u32, ServingCoefficients>)],
    dense: &ServingCoefficients,
) -> Result<Vec<RatioMinimaRow>> {
    if per_alpha.is_empty() {
        return Err(Error::MissingInput("ratio minima need at least one acceptance rate".into()));
    }
    per_alpha
        .iter()
        .map(|(alpha, by_k)| {
            let m = min_cost_ratios_over_k(by_k, dense)?;
            Ok(RatioMinimaRow {
                alpha: *alpha,
                min_c1r: m.c1r.ratio,
                argmin_k_c1r: m.c1r.k,
                min_c2r: m.c2r.ratio,
                argmin_k_c2r: m.c2r.k,
            })
        })
        .collect()
}

pub fn scaling_report(trend: &ScalingTrend, points: &[(f64, f64)]) -> Result<Vec<ScalingRow>> {
    if points.is_empty() {
        return Err(Error::MissingInput("scaling report needs coefficient points".into()));
    }
    Ok(points
        .iter()
        .map(|&(x, y)| ScalingRow {
            predictor: x,
            coefficient: y,
            fitted_line: trend.predict(x),
        })
        .collect())
}

pub fn write_report<W: Write, R: Serialize>(writer: W, rows: &[R]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<report>", e))?;
    Ok(())
}

pub fn read_report<R: Read, T: DeserializeOwned>(reader: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
