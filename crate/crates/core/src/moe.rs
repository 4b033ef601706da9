//! Mixture-of-experts corrections.
//!
//! With `m` of `M` experts picked uniformly per token, `T` routed tokens touch
//! an expected fraction `phi(T) = 1 - (1 - m/M)^T` of the experts. Costs split
//! into a low-coverage part and a saturation increment scaled by `phi`. Since
//! `T` depends on concurrency and therefore on latency itself, latency is the
//! solution of a fixed-point equation `L = f(L)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spec::{expected_accept_length, SpecParams};

/// Experts activated per token (`m`) out of the total (`M`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeRouting {
    #[serde(rename = "m", alias = "active")]
    pub active: u32,
    #[serde(rename = "M", alias = "total")]
    pub total: u32,
}

impl MoeRouting {
    pub fn new(active: u32, total: u32) -> Result<Self> {
        if active == 0 || active > total {
            return Err(Error::Validation(format!(
                "expert routing needs 1 <= m <= M (got m={active}, M={total})"
            )));
        }
        Ok(MoeRouting { active, total })
    }

    pub fn fraction(&self) -> f64 {
        f64::from(self.active) / f64::from(self.total)
    }
}

/// Low-coverage costs (`*u`) and saturation increments (`*s`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoeCoefficients {
    pub c1u: f64,
    pub c1s: f64,
    pub c2u: f64,
    pub c2s: f64,
}

impl MoeCoefficients {
    pub fn validate(&self) -> Result<()> {
        let all = [self.c1u, self.c1s, self.c2u, self.c2s];
        if all.iter().any(|c| !(*c >= 0.0 && c.is_finite())) || self.c1u <= 0.0 {
            return Err(Error::Validation(format!(
                "MoE coefficients must be >= 0 with c1u > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Speculative cost split where only the verifier terms carry a coverage
/// dependent saturation increment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoeSpecCoefficients {
    pub c1p: f64,
    pub c1vu: f64,
    pub c1vs: f64,
    pub c1d: f64,
    pub c2p: f64,
    pub c2vu: f64,
    pub c2vs: f64,
    pub c2d: f64,
}

impl MoeSpecCoefficients {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.c1p, self.c1vu, self.c1vs, self.c1d, self.c2p, self.c2vu, self.c2vs, self.c2d,
        ];
        if all.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(Error::Validation(format!(
                "MoE speculative coefficients must be finite and >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Expected fraction of experts touched by `t` routed tokens.
pub fn expert_coverage(routing: &MoeRouting, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    1.0 - (1.0 - routing.fraction()).powf(t)
}

const DAMPING: f64 = 0.5;
const MAX_DAMPED_STEPS: usize = 1000;
const LATENCY_CAP: f64 = 1e6;
/// Acceptance threshold for a reported fixed point, relative to `L`.
pub const FIXED_POINT_TOLERANCE: f64 = 1e-9;
const POLISH_TOLERANCE: f64 = 1e-14;
const SCAN_POINTS: usize = 4000;

/// Smallest stable root of `L = numerator(L) / denominator(L)`.
///
/// `terms(L)` returns `(numerator, denominator)`; both must be
/// non-decreasing/non-increasing in `L` respectively, which holds for every
/// coverage-corrected law here. Starting below the smallest root, damped
/// iteration climbs monotonically onto it. If that stalls, a log-spaced scan
/// over `[L0, 1e6]` brackets the first sign change and bisection finishes it.
fn solve_fixed_point(rps: f64, terms: impl Fn(f64) -> (f64, f64)) -> Result<f64> {
    let f = |l: f64| -> Option<f64> {
        let (num, den) = terms(l);
        (den > 0.0).then(|| num / den)
    };
    let no_solution = |reason: &str| Error::NoStableSolution {
        rps,
        reason: reason.to_string(),
    };

    let start = f(0.0).ok_or_else(|| no_solution("saturated at zero load"))?;
    if rps == 0.0 {
        return Ok(start);
    }

    let mut l = start;
    let mut converged = false;
    for _ in 0..MAX_DAMPED_STEPS {
        let Some(next) = f(l) else { break };
        if (next - l).abs() <= POLISH_TOLERANCE * l {
            l = next;
            converged = true;
            break;
        }
        l = (1.0 - DAMPING) * l + DAMPING * next;
        if l > LATENCY_CAP {
            break;
        }
    }
    if !converged {
        l = bracket_and_bisect(start, &f).ok_or_else(|| {
            no_solution("no fixed point with a positive denominator below the latency cap")
        })?;
    }

    let fl = f(l).ok_or_else(|| no_solution("denominator not positive at the solution"))?;
    if (fl - l).abs() > FIXED_POINT_TOLERANCE * l {
        return Err(no_solution("fixed-point residual above tolerance"));
    }
    Ok(l)
}

fn bracket_and_bisect(start: f64, f: &impl Fn(f64) -> Option<f64>) -> Option<f64> {
    // g(L) = L - f(L) is <= 0 at the start and first crosses zero at the root.
    let g = |l: f64| f(l).map(|v| l - v);
    let lo_log = start.max(f64::MIN_POSITIVE).ln();
    let hi_log = LATENCY_CAP.ln();
    let mut lo = start;
    for i in 1..=SCAN_POINTS {
        let l = (lo_log + (hi_log - lo_log) * i as f64 / SCAN_POINTS as f64).exp();
        match g(l) {
            None => return None,
            Some(v) if v >= 0.0 => {
                let mut hi = l;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    match g(mid) {
                        Some(v) if v < 0.0 => lo = mid,
                        Some(_) => hi = mid,
                        None => return None,
                    }
                }
                return Some(hi);
            }
            Some(_) => lo = l,
        }
    }
    None
}

/// Mean latency under the coverage-corrected latency law, with routed tokens
/// approximated by the Little's Law concurrency `rps * L`.
pub fn predict_moe_latency(coeffs: &MoeCoefficients, routing: &MoeRouting, rps: f64) -> Result<f64> {
    solve_fixed_point(rps, |l| moe_terms(coeffs, routing, rps, l))
}

fn moe_terms(coeffs: &MoeCoefficients, routing: &MoeRouting, rps: f64, l: f64) -> (f64, f64) {
    let phi = expert_coverage(routing, rps * l);
    (
        coeffs.c1u + phi * coeffs.c1s,
        1.0 - rps * (coeffs.c2u + phi * coeffs.c2s),
    )
}

/// Routed verifier tokens per step: `rps * L * k` under speculation, `rps * L`
/// with speculation off.
fn verifier_tokens(rps: f64, l: f64, k: u32) -> f64 {
    rps * l * f64::from(k.max(1))
}

pub fn predict_moe_sd_latency(
    coeffs: &MoeSpecCoefficients,
    routing: &MoeRouting,
    spec: &SpecParams,
    g: u32,
    rps: f64,
) -> Result<f64> {
    solve_fixed_point(rps, |l| moe_sd_terms(coeffs, routing, spec, g, rps, l))
}

fn moe_sd_terms(
    c: &MoeSpecCoefficients,
    routing: &MoeRouting,
    spec: &SpecParams,
    g: u32,
    rps: f64,
    l: f64,
) -> (f64, f64) {
    let cycles = f64::from(g) / expected_accept_length(spec);
    let k = f64::from(spec.k);
    let phi = expert_coverage(routing, verifier_tokens(rps, l, spec.k));
    (
        c.c1p + cycles * (c.c1vu + phi * c.c1vs + k * c.c1d),
        1.0 - rps * (c.c2p + cycles * (c.c2vu + phi * c.c2vs + k * c.c2d)),
    )
}

/// `|L - f(L)| / L` for a candidate latency under the dense MoE law.
pub fn moe_residual(coeffs: &MoeCoefficients, routing: &MoeRouting, rps: f64, l: f64) -> f64 {
    let (num, den) = moe_terms(coeffs, routing, rps, l);
    (l - num / den).abs() / l
}

/// `|L - f(L)| / L` for a candidate latency under the speculative MoE law.
pub fn moe_sd_residual(
    coeffs: &MoeSpecCoefficients,
    routing: &MoeRouting,
    spec: &SpecParams,
    g: u32,
    rps: f64,
    l: f64,
) -> f64 {
    let (num, den) = moe_sd_terms(coeffs, routing, spec, g, rps, l);
    (l - num / den).abs() / l
}
