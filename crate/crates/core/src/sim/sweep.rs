use rayon::prelude::*;

use crate::error::Result;
use crate::model::SweepDataset;
use crate::sim::engine::{run_sim, run_sync, ArrivalProcess, SimConfig, SimResult};

/// Bracketing limits for [`find_max_stable_rate_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RateSearch {
    pub max_doublings: usize,
    pub bisection_steps: usize,
}

impl Default for RateSearch {
    fn default() -> Self {
        RateSearch {
            max_doublings: 30,
            bisection_steps: 12,
        }
    }
}

/// Constant-rate points between the synchronous baseline and the ceiling.
pub const SWEEP_RATES: usize = 8;

/// Synchronous throughput, or 1 when a request takes no time at all.
fn starting_rate(sync: &SimResult) -> f64 {
    if sync.mean_latency > 0.0 && sync.mean_latency.is_finite() {
        1.0 / sync.mean_latency
    } else {
        1.0
    }
}

fn is_stable(config: &SimConfig, rps: f64) -> Result<bool> {
    Ok(!run_sim(config, rps)?.saturated)
}

/// Largest offered rate the simulator serves without saturating, found by
/// doubling from the synchronous throughput and then bisecting. Returns the
/// lower bracket, which is the search ceiling when nothing ever saturates.
pub fn find_max_stable_rate(config: &SimConfig) -> Result<f64> {
    find_max_stable_rate_with(config, &RateSearch::default())
}

pub fn find_max_stable_rate_with(config: &SimConfig, search: &RateSearch) -> Result<f64> {
    let start = starting_rate(&run_sync(config)?);
    find_from(config, start, search)
}

fn find_from(config: &SimConfig, start: f64, search: &RateSearch) -> Result<f64> {
    let (mut lo, mut hi);
    if is_stable(config, start)? {
        lo = start;
        hi = None;
        for _ in 0..search.max_doublings {
            let r = lo * 2.0;
            if is_stable(config, r)? {
                lo = r;
            } else {
                hi = Some(r);
                break;
            }
        }
    } else {
        hi = Some(start);
        lo = start;
        for _ in 0..search.max_doublings {
            lo *= 0.5;
            if is_stable(config, lo)? {
                break;
            }
        }
    }
    let Some(mut hi) = hi else {
        return Ok(lo);
    };
    for _ in 0..search.bisection_steps {
        let mid = 0.5 * (lo + hi);
        if is_stable(config, mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// A sweep together with the runs behind each point.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub dataset: SweepDataset,
    pub ceiling: f64,
    /// Runs in rate order: the synchronous baseline (rerun open-loop under
    /// Poisson arrivals), then the eight constant-rate runs.
    pub runs: Vec<SimResult>,
}

/// Synchronous baseline, ceiling search and eight evenly spaced constant-rate
/// runs strictly between them.
pub fn run_sweep(config: &SimConfig) -> Result<SweepDataset> {
    Ok(run_sweep_detailed(config)?.dataset)
}

pub fn run_sweep_detailed(config: &SimConfig) -> Result<SweepRun> {
    let sync = run_sync(config)?;
    let base = sync.achieved_rps;
    let ceiling = find_from(config, starting_rate(&sync), &RateSearch::default())?;
    // A ceiling at or below the baseline leaves no room between them; spread
    // the rates over one baseline width above it instead and let the
    // saturation flags speak.
    let top = if ceiling > base { ceiling } else { 2.0 * base };
    let step = (top - base) / (SWEEP_RATES + 1) as f64;
    // Under Poisson arrivals a request also meets the rps * L others already
    // in the system, so the closed-loop point would sit off the open-loop
    // curve; rerun the baseline rate open-loop instead.
    let first = match config.arrival {
        ArrivalProcess::ConstantRate => 1,
        ArrivalProcess::Poisson => 0,
    };
    let rates: Vec<f64> = (first..=SWEEP_RATES).map(|i| base + step * i as f64).collect();
    let open: Vec<SimResult> = rates
        .par_iter()
        .map(|&r| run_sim(config, r))
        .collect::<Result<_>>()?;
    let mut runs = if first == 1 { vec![sync] } else { Vec::new() };
    runs.extend(open);
    let points = runs.iter().map(SimResult::to_load_point).collect();
    Ok(SweepRun {
        dataset: SweepDataset::new(config.workload.clone(), points),
        ceiling,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{fit_basic, fit_spec};
    use crate::model::{DecodingMode, LatencyColumn, WorkloadConfig};
    use crate::sim::engine::{PhaseCost, StepCosts};

    fn config(g: u32, s1: f64, s2: f64) -> SimConfig {
        SimConfig {
            step_costs: StepCosts {
                prefill: PhaseCost::default(),
                verify: PhaseCost::new(s1, s2),
                draft: PhaseCost::default(),
            },
            workload: WorkloadConfig {
                model_id: "sim".into(),
                hardware_id: "cpu".into(),
                prefill_tokens: 64,
                decode_tokens: g,
                mode: DecodingMode::Dense,
            },
            moe: None,
            arrival: ArrivalProcess::ConstantRate,
            seed: 9,
            max_concurrency: None,
            warmup_requests: 200,
            measured_requests: 3000,
        }
    }

    #[test]
    fn ceiling_near_analytic_saturation() {
        let cfg = config(256, 0.01, 0.002);
        let c2 = 256.0 * 0.002;
        let r = find_max_stable_rate(&cfg).unwrap();
        assert!((r * c2 - 1.0).abs() < 0.1, "ceiling {r} vs {}", 1.0 / c2);
    }

    #[test]
    fn ceiling_with_single_slot() {
        let mut cfg = config(64, 0.01, 0.002);
        cfg.max_concurrency = Some(1);
        cfg.measured_requests = 1000;
        let l_sync = run_sync(&cfg).unwrap().mean_latency;
        let r = find_max_stable_rate(&cfg).unwrap();
        assert!((r * l_sync - 1.0).abs() < 0.1, "ceiling {r} vs {}", 1.0 / l_sync);
    }

    #[test]
    fn no_batch_cost_reaches_search_cap() {
        let mut cfg = config(8, 0.01, 0.0);
        cfg.measured_requests = 200;
        cfg.warmup_requests = 20;
        let start = 1.0 / run_sync(&cfg).unwrap().mean_latency;
        for doublings in [3, 5, 7] {
            let search = RateSearch {
                max_doublings: doublings,
                ..RateSearch::default()
            };
            let r = find_max_stable_rate_with(&cfg, &search).unwrap();
            assert_eq!(r, start * 2f64.powi(doublings as i32));
        }
    }

    #[test]
    fn sweep_has_nine_increasing_points_and_refits() {
        let cfg = config(256, 0.01, 0.002);
        let ds = run_sweep(&cfg).unwrap();
        assert_eq!(ds.points.len(), 9);
        assert!(ds.points.windows(2).all(|w| w[0].rps < w[1].rps));
        let fit = fit_basic(&ds, LatencyColumn::Mean).unwrap();
        assert!((fit.params.c1 / (256.0 * 0.01) - 1.0).abs() < 0.02, "{:?}", fit.params);
        assert!((fit.params.c2 / (256.0 * 0.002) - 1.0).abs() < 0.02, "{:?}", fit.params);
    }

    #[test]
    fn spec_grid_sweeps_refit_phase_costs() {
        let (v, d) = (PhaseCost::new(0.01, 0.001), PhaseCost::new(0.002, 0.0002));
        let mut modes = vec![DecodingMode::Dense];
        for alpha in [0.6, 0.8] {
            for draft_k in [1, 2, 4] {
                modes.push(DecodingMode::Sd { alpha, draft_k });
            }
        }
        let sweeps: Vec<SweepDataset> = modes
            .par_iter()
            .map(|&mode| {
                let mut cfg = config(256, v.sigma1, v.sigma2);
                cfg.step_costs.draft = d;
                cfg.workload.mode = mode;
                cfg.warmup_requests = 1000;
                run_sweep(&cfg).unwrap()
            })
            .collect();
        let fit = fit_spec(&sweeps, LatencyColumn::Mean).unwrap().params;
        for (got, want) in [
            (fit.c1v, v.sigma1),
            (fit.c2v, v.sigma2),
            (fit.c1d, d.sigma1),
            (fit.c2d, d.sigma2),
        ] {
            assert!((got / want - 1.0).abs() < 0.05, "{fit:?}");
        }
    }
}
