//! Speculative decoding costs.
//!
//! Each decode cycle runs `k` drafter passes and one verifier pass and yields
//! on average `E = (1 - alpha^(k+1)) / (1 - alpha)` tokens, so a request of
//! `g` tokens needs `g / E` cycles. Splitting the per-request costs into
//! prefill, verify and draft parts gives effective `C1`/`C2` coefficients that
//! plug straight into the steady-state latency law.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict_latency, ServingCoefficients};

/// Per-token acceptance probability and draft length. `k = 0` means
/// speculation is off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecParams {
    pub alpha: f64,
    pub k: u32,
}

impl SpecParams {
    pub fn new(alpha: f64, k: u32) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Validation(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(SpecParams { alpha, k })
    }

    pub const fn off() -> Self {
        SpecParams { alpha: 0.0, k: 0 }
    }
}

/// Prefill / verify / draft split of the fixed (`c1*`) and load-dependent
/// (`c2*`) costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecCostCoefficients {
    pub c1p: f64,
    pub c1v: f64,
    pub c1d: f64,
    pub c2p: f64,
    pub c2v: f64,
    pub c2d: f64,
}

impl SpecCostCoefficients {
    pub fn validate(&self) -> Result<()> {
        let all = [self.c1p, self.c1v, self.c1d, self.c2p, self.c2v, self.c2d];
        if all.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(Error::Validation(format!(
                "speculative cost coefficients must be finite and >= 0: {self:?}"
            )));
        }
        if self.c1p + self.c1v <= 0.0 {
            return Err(Error::Validation("c1p + c1v must be > 0".into()));
        }
        Ok(())
    }

    /// Dense-decoding coefficients (`k = 0`).
    pub fn dense(&self, g: u32) -> ServingCoefficients {
        effective_coefficients(self, &SpecParams::off(), g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRatios {
    pub c1r: f64,
    pub c2r: f64,
}

/// Expected tokens produced per cycle, bonus token included.
pub fn expected_accept_length(spec: &SpecParams) -> f64 {
    let SpecParams { alpha, k } = *spec;
    if k == 0 || alpha == 0.0 {
        1.0
    } else if alpha >= 1.0 {
        f64::from(k) + 1.0
    } else {
        (1.0 - alpha.powi(k as i32 + 1)) / (1.0 - alpha)
    }
}

/// Effective `C1`/`C2` for a request generating `g` tokens.
pub fn effective_coefficients(
    costs: &SpecCostCoefficients,
    spec: &SpecParams,
    g: u32,
) -> ServingCoefficients {
    let cycles = f64::from(g) / expected_accept_length(spec);
    let k = f64::from(spec.k);
    ServingCoefficients {
        c1: costs.c1p + cycles * (costs.c1v + k * costs.c1d),
        c2: costs.c2p + cycles * (costs.c2v + k * costs.c2d),
    }
}

pub fn predict_sd_latency(
    costs: &SpecCostCoefficients,
    spec: &SpecParams,
    g: u32,
    rps: f64,
) -> Result<f64> {
    predict_latency(&effective_coefficients(costs, spec, g), rps)
}

/// Dense-to-speculative latency ratio in its load-decomposed form:
/// `(1 / C1R) * (1 + (1 - C2R) * r / (1 - r))` with `r = rps * dense.c2`.
pub fn speedup(dense: &ServingCoefficients, sd: &ServingCoefficients, rps: f64) -> Result<f64> {
    for c in [dense, sd] {
        if rps * c.c2 >= 1.0 {
            return Err(Error::Stability {
                rps,
                saturation_rps: 1.0 / c.c2,
            });
        }
    }
    let c1r = sd.c1 / dense.c1;
    let r = rps * dense.c2;
    if dense.c2 == 0.0 {
        // r = 0 kills the load term; C2R is undefined but irrelevant.
        return Ok((1.0 - rps * sd.c2) / c1r);
    }
    let c2r = sd.c2 / dense.c2;
    Ok((1.0 + (1.0 - c2r) * r / (1.0 - r)) / c1r)
}

pub fn cost_ratios(dense: &ServingCoefficients, sd: &ServingCoefficients) -> Result<CostRatios> {
    if !(dense.c1 > 0.0) {
        return Err(Error::Degenerate("dense c1 must be > 0".into()));
    }
    if dense.c2 == 0.0 {
        return Err(Error::Degenerate(
            "dense c2 is zero; the load-dependent cost ratio is undefined".into(),
        ));
    }
    Ok(CostRatios {
        c1r: sd.c1 / dense.c1,
        c2r: sd.c2 / dense.c2,
    })
}

/// Smallest cost ratio together with the draft length attaining it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioMinimum {
    pub ratio: f64,
    pub k: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioMinima {
    pub c1r: RatioMinimum,
    pub c2r: RatioMinimum,
}

/// Minimum `C1R` and `C2R` over draft lengths; ties go to the smaller `k`.
pub fn min_cost_ratios_over_k(
    per_k: &BTreeMap<u32, ServingCoefficients>,
    dense: &ServingCoefficients,
) -> Result<RatioMinima> {
    let mut best: Option<RatioMinima> = None;
    // BTreeMap iterates in ascending k, so strict `<` keeps the smaller k on ties.
    for (&k, sd) in per_k {
        let ratios = cost_ratios(dense, sd)?;
        best = Some(match best {
            None => RatioMinima {
                c1r: RatioMinimum { ratio: ratios.c1r, k },
                c2r: RatioMinimum { ratio: ratios.c2r, k },
            },
            Some(mut b) => {
                if ratios.c1r < b.c1r.ratio {
                    b.c1r = RatioMinimum { ratio: ratios.c1r, k };
                }
                if ratios.c2r < b.c2r.ratio {
                    b.c2r = RatioMinimum { ratio: ratios.c2r, k };
                }
                b
            }
        });
    }
    best.ok_or_else(|| Error::InsufficientData("per-k coefficient map is empty".into()))
}

/// Draft length with the lowest predicted latency at `rps`, or `k = 0` when
/// speculation does not pay off. Unstable draft lengths are skipped.
pub fn optimal_draft_length(
    costs: &SpecCostCoefficients,
    alpha: f64,
    g: u32,
    rps: f64,
    k_max: u32,
) -> Result<(u32, f64)> {
    let mut best: Option<(u32, f64)> = None;
    for k in 0..=k_max {
        let Ok(latency) = predict_sd_latency(costs, &SpecParams { alpha, k }, g, rps) else {
            continue;
        };
        if best.is_none_or(|(_, l)| latency < l) {
            best = Some((k, latency));
        }
    }
    best.ok_or(Error::NoStableConfig { rps, k_max })
}
