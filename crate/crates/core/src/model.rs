//! Shared domain types and the steady-state latency law.
//!
//! A continuously batched server is summarised by two effective costs: `c1`,
//! the latency a request pays regardless of load, and `c2`, the extra latency
//! each concurrently active request adds. Little's Law gives the average
//! concurrency as `B = rps * L`, so `L = c1 + rps * L * c2`, which solves to
//! `L = c1 / (1 - rps * c2)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spec::SpecParams;

/// How tokens are produced for one experimental condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodingMode {
    Dense,
    Sd { alpha: f64, draft_k: u32 },
}

impl DecodingMode {
    pub fn label(&self) -> &'static str {
        match self {
            DecodingMode::Dense => "dense",
            DecodingMode::Sd { .. } => "sd",
        }
    }

    /// Speculation parameters; dense decoding maps to `k = 0`.
    pub fn spec_params(&self) -> SpecParams {
        match *self {
            DecodingMode::Dense => SpecParams::off(),
            DecodingMode::Sd { alpha, draft_k } => SpecParams { alpha, k: draft_k },
        }
    }
}

/// One experimental condition: which model on which hardware, with which
/// prompt/generation lengths and decoding mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub model_id: String,
    pub hardware_id: String,
    pub prefill_tokens: u32,
    /// Generated tokens per request (`g`).
    pub decode_tokens: u32,
    #[serde(flatten)]
    pub mode: DecodingMode,
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prefill_tokens == 0 || self.decode_tokens == 0 {
            return Err(Error::Validation(format!(
                "prefill_tokens and decode_tokens must be >= 1 (got {} and {})",
                self.prefill_tokens, self.decode_tokens
            )));
        }
        if let DecodingMode::Sd { alpha, draft_k } = self.mode {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::Validation(format!("alpha {alpha} outside [0, 1]")));
            }
            if draft_k == 0 {
                return Err(Error::Validation("sd mode requires draft_k >= 1".into()));
            }
        }
        Ok(())
    }

    /// Grouping key with exact float identity on `alpha`.
    pub(crate) fn key(&self) -> (String, String, u32, u32, Option<(u64, u32)>) {
        let mode = match self.mode {
            DecodingMode::Dense => None,
            DecodingMode::Sd { alpha, draft_k } => Some((alpha.to_bits(), draft_k)),
        };
        (
            self.model_id.clone(),
            self.hardware_id.clone(),
            self.prefill_tokens,
            self.decode_tokens,
            mode,
        )
    }
}

impl fmt::Display for WorkloadConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}@{} p={} g={} {}",
            self.model_id,
            self.hardware_id,
            self.prefill_tokens,
            self.decode_tokens,
            self.mode.label()
        )?;
        if let DecodingMode::Sd { alpha, draft_k } = self.mode {
            write!(f, " alpha={alpha} k={draft_k}")?;
        }
        Ok(())
    }
}

/// Which latency statistic a fit targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyColumn {
    #[default]
    Mean,
    P95,
    P99,
}

impl LatencyColumn {
    pub fn as_str(&self) -> &'static str {
        match self {
            LatencyColumn::Mean => "mean",
            LatencyColumn::P95 => "p95",
            LatencyColumn::P99 => "p99",
        }
    }
}

impl std::str::FromStr for LatencyColumn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LatencyColumn::Mean),
            "p95" => Ok(LatencyColumn::P95),
            "p99" => Ok(LatencyColumn::P99),
            other => Err(Error::Validation(format!(
                "unknown latency column `{other}` (expected mean, p95 or p99)"
            ))),
        }
    }
}

/// Latency statistics measured at one request rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadPoint {
    pub rps: f64,
    pub mean_latency: f64,
    pub p95_latency: Option<f64>,
    pub p99_latency: Option<f64>,
    pub n_requests: u64,
    /// Set by the simulator when the run never reached a steady state.
    #[serde(default)]
    pub saturated: bool,
}

impl LoadPoint {
    pub fn new(rps: f64, mean_latency: f64, n_requests: u64) -> Self {
        LoadPoint {
            rps,
            mean_latency,
            p95_latency: None,
            p99_latency: None,
            n_requests,
            saturated: false,
        }
    }

    /// Average concurrency implied by Little's Law.
    pub fn effective_batch(&self) -> f64 {
        effective_batch(self.rps, self.mean_latency)
    }

    pub fn latency(&self, column: LatencyColumn) -> Option<f64> {
        match column {
            LatencyColumn::Mean => Some(self.mean_latency),
            LatencyColumn::P95 => self.p95_latency,
            LatencyColumn::P99 => self.p99_latency,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rps >= 0.0 && self.rps.is_finite()) {
            return Err(Error::Validation(format!("rps {} must be >= 0", self.rps)));
        }
        if !(self.mean_latency > 0.0 && self.mean_latency.is_finite()) {
            return Err(Error::Validation(format!(
                "mean latency {} must be > 0",
                self.mean_latency
            )));
        }
        if self.n_requests == 0 {
            return Err(Error::Validation("n_requests must be >= 1".into()));
        }
        if let (Some(p95), Some(p99)) = (self.p95_latency, self.p99_latency) {
            if p99 < p95 {
                return Err(Error::Validation(format!("p99 {p99} is below p95 {p95}")));
            }
        }
        Ok(())
    }
}

/// Load points for a single condition, ordered by ascending rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepDataset {
    pub config: WorkloadConfig,
    pub points: Vec<LoadPoint>,
}

impl SweepDataset {
    /// Builds a dataset, sorting points by rate.
    pub fn new(config: WorkloadConfig, mut points: Vec<LoadPoint>) -> Self {
        points.sort_by(|a, b| a.rps.total_cmp(&b.rps));
        SweepDataset { config, points }
    }

    /// Points usable for fitting: everything not flagged as saturated.
    pub fn stable_points(&self) -> impl Iterator<Item = &LoadPoint> {
        self.points.iter().filter(|p| !p.saturated)
    }
}

/// Load-independent (`c1`) and per-active-request (`c2`) latency costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServingCoefficients {
    pub c1: f64,
    pub c2: f64,
}

impl ServingCoefficients {
    pub fn new(c1: f64, c2: f64) -> Result<Self> {
        let coeffs = ServingCoefficients { c1, c2 };
        coeffs.validate()?;
        Ok(coeffs)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c1.is_finite()) {
            return Err(Error::Validation(format!("c1 = {} must be > 0", self.c1)));
        }
        if !(self.c2 >= 0.0 && self.c2.is_finite()) {
            return Err(Error::Validation(format!("c2 = {} must be >= 0", self.c2)));
        }
        Ok(())
    }
}

/// Steady-state mean latency `c1 / (1 - rps * c2)`.
pub fn predict_latency(coeffs: &ServingCoefficients, rps: f64) -> Result<f64> {
    let load = rps * coeffs.c2;
    if load >= 1.0 {
        return Err(Error::Stability {
            rps,
            saturation_rps: 1.0 / coeffs.c2,
        });
    }
    Ok(coeffs.c1 / (1.0 - load))
}

/// Little's Law concurrency `rps * latency`.
pub fn effective_batch(rps: f64, latency: f64) -> f64 {
    rps * latency
}

/// Rate at which predicted latency diverges.
pub fn saturation_rate(coeffs: &ServingCoefficients) -> Result<f64> {
    if coeffs.c2 == 0.0 {
        return Err(Error::Unbounded);
    }
    Ok(1.0 / coeffs.c2)
}

/// Maps a point onto normalized load `x = rps * c2` and normalized latency
/// `y = L / c1`. Points that follow the latency law exactly land on
/// `y = 1 / (1 - x)`.
pub fn normalize_point(coeffs: &ServingCoefficients, point: &LoadPoint) -> (f64, f64) {
    (point.rps * coeffs.c2, point.mean_latency / coeffs.c1)
}
