use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LoadPoint, WorkloadConfig};
use crate::moe::MoeRouting;
use crate::sim::sampling::{sample_accepted, CoverageSampler};
use crate::spec::SpecParams;

/// Seconds charged by one phase of an iteration: `sigma1 + B * sigma2`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseCost {
    pub sigma1: f64,
    pub sigma2: f64,
}

impl PhaseCost {
    pub fn new(sigma1: f64, sigma2: f64) -> Self {
        PhaseCost { sigma1, sigma2 }
    }

    fn is_zero(&self) -> bool {
        self.sigma1 == 0.0 && self.sigma2 == 0.0
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.sigma1 >= 0.0 && self.sigma1.is_finite())
            || !(self.sigma2 >= 0.0 && self.sigma2.is_finite())
        {
            return Err(Error::Validation(format!(
                "{what} costs must be finite and >= 0 (got sigma1={}, sigma2={})",
                self.sigma1, self.sigma2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepCosts {
    #[serde(default)]
    pub prefill: PhaseCost,
    pub verify: PhaseCost,
    #[serde(default)]
    pub draft: PhaseCost,
}

/// Expert routing plus the per-phase costs that scale with sampled coverage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoeSaturation {
    pub routing: MoeRouting,
    #[serde(default)]
    pub prefill: PhaseCost,
    #[serde(default)]
    pub verify: PhaseCost,
    #[serde(default)]
    pub draft: PhaseCost,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    #[default]
    ConstantRate,
    Poisson,
}

fn default_warmup() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub step_costs: StepCosts,
    /// Prompt/generation lengths; the decoding mode sets α and k.
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub moe: Option<MoeSaturation>,
    #[serde(default)]
    pub arrival: ArrivalProcess,
    pub seed: u64,
    /// Admission cap on concurrently active requests.
    #[serde(default)]
    pub max_concurrency: Option<usize>,
    #[serde(default = "default_warmup")]
    pub warmup_requests: usize,
    pub measured_requests: usize,
}

impl SimConfig {
    pub fn spec(&self) -> SpecParams {
        self.workload.mode.spec_params()
    }

    pub fn validate(&self) -> Result<()> {
        self.workload.validate()?;
        self.step_costs.prefill.validate("prefill")?;
        self.step_costs.verify.validate("verify")?;
        self.step_costs.draft.validate("draft")?;
        if let Some(moe) = &self.moe {
            MoeRouting::new(moe.routing.active, moe.routing.total)?;
            moe.prefill.validate("MoE prefill")?;
            moe.verify.validate("MoE verify")?;
            moe.draft.validate("MoE draft")?;
        }
        if self.measured_requests == 0 {
            return Err(Error::Validation("measured_requests must be >= 1".into()));
        }
        if self.max_concurrency == Some(0) {
            return Err(Error::Validation("max_concurrency must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub arrival: f64,
    pub completion: f64,
    pub latency: f64,
    /// Tokens generated, including any overshoot past the target length.
    pub tokens: u32,
    /// Decode iterations (speculative cycles) used.
    pub cycles: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// `None` for the synchronous closed loop.
    pub offered_rps: Option<f64>,
    /// Measured requests in arrival order.
    pub per_request: Vec<RequestRecord>,
    pub mean_latency: f64,
    pub p95_latency: f64,
    pub p99_latency: f64,
    /// Time-averaged number of requests in the system (queued or active).
    pub time_avg_concurrency: f64,
    /// Arrival rate measured over the window spanned by measured arrivals.
    pub achieved_rps: f64,
    pub saturated: bool,
    /// The run was cut short because the backlog exploded.
    pub aborted: bool,
}

impl SimResult {
    pub fn tokens_per_cycle(&self) -> f64 {
        let (tokens, cycles) = self.per_request.iter().fold((0u64, 0u64), |(t, c), r| {
            (t + u64::from(r.tokens), c + u64::from(r.cycles))
        });
        tokens as f64 / cycles as f64
    }

    pub fn total_cycles(&self) -> u64 {
        self.per_request.iter().map(|r| u64::from(r.cycles)).sum()
    }

    /// `|B - rps * L| / (rps * L)` for the measured window.
    pub fn littles_law_error(&self) -> f64 {
        let expected = self.achieved_rps * self.mean_latency;
        (self.time_avg_concurrency - expected).abs() / expected
    }

    /// Sweep point at the offered rate (or the achieved rate for the
    /// synchronous baseline).
    pub fn to_load_point(&self) -> LoadPoint {
        LoadPoint {
            rps: self.offered_rps.unwrap_or(self.achieved_rps),
            mean_latency: self.mean_latency,
            p95_latency: Some(self.p95_latency),
            p99_latency: Some(self.p99_latency),
            n_requests: self.per_request.len() as u64,
            saturated: self.saturated,
        }
    }
}

/// Slope threshold of the in-system count, in requests per second.
const SATURATION_SLOPE: f64 = 0.01;
const ARRIVAL_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy)]
struct Request {
    arrival: f64,
    completion: Option<f64>,
    prefilled: bool,
    tokens: u32,
    cycles: u32,
}

enum Arrivals {
    Open {
        mean_gap: f64,
        exp: Option<Exp<f64>>,
        rng: ChaCha8Rng,
        next: f64,
    },
    Closed,
}

impl Arrivals {
    fn peek(&self) -> Option<f64> {
        match self {
            Arrivals::Open { next, .. } => Some(*next),
            Arrivals::Closed => None,
        }
    }

    /// Moves to the following arrival and returns its time.
    fn advance(&mut self) -> f64 {
        match self {
            Arrivals::Open {
                mean_gap,
                exp,
                rng,
                next,
            } => {
                *next += match exp {
                    Some(e) => e.sample(rng),
                    None => *mean_gap,
                };
                *next
            }
            Arrivals::Closed => f64::INFINITY,
        }
    }
}

struct Engine<'a> {
    config: &'a SimConfig,
    spec: SpecParams,
    rng: ChaCha8Rng,
    coverage: Option<CoverageSampler>,
}

impl Engine<'_> {
    fn phase(&mut self, base: PhaseCost, sat: Option<PhaseCost>, b: usize, tokens: u64) -> f64 {
        let b = b as f64;
        let mut cost = base.sigma1 + b * base.sigma2;
        if let (Some(sat), Some(sampler)) = (sat, self.coverage.as_mut()) {
            if !sat.is_zero() {
                let cov = sampler.sample(tokens, &mut self.rng);
                cost += cov * (sat.sigma1 + b * sat.sigma2);
            }
        }
        cost
    }

    /// Duration of one engine iteration with `b` active requests, `n_new` of
    /// which are still waiting for prefill.
    fn iteration(&mut self, b: usize, n_new: usize) -> f64 {
        let costs = self.config.step_costs;
        let moe = self.config.moe;
        let k = self.spec.k as usize;
        let mut dur = 0.0;
        if n_new > 0 {
            let tokens = n_new as u64 * u64::from(self.config.workload.prefill_tokens);
            dur += self.phase(costs.prefill, moe.map(|m| m.prefill), b, tokens);
        }
        if n_new < b {
            let verify_tokens = if k == 0 { b } else { b * k } as u64;
            dur += self.phase(costs.verify, moe.map(|m| m.verify), b, verify_tokens);
            for _ in 0..k {
                dur += self.phase(costs.draft, moe.map(|m| m.draft), b, b as u64);
            }
        }
        dur
    }

    fn tokens_this_cycle(&mut self) -> u32 {
        if self.spec.k == 0 {
            1
        } else {
            sample_accepted(&self.spec, &mut self.rng)
        }
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Piecewise-constant count of requests in the system.
struct InSystem {
    /// `(time, count from this time on)`, times non-decreasing.
    steps: Vec<(f64, f64)>,
    end: f64,
}

impl InSystem {
    fn new(requests: &[Request], end: f64) -> Self {
        let mut events: Vec<(f64, i64)> = Vec::with_capacity(2 * requests.len());
        for r in requests {
            events.push((r.arrival, 1));
            if let Some(c) = r.completion {
                events.push((c, -1));
            }
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut count = 0i64;
        let steps = events
            .into_iter()
            .map(|(t, d)| {
                count += d;
                (t, count as f64)
            })
            .collect();
        InSystem { steps, end }
    }

    fn segments(&self, lo: f64, hi: f64) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let n = self.steps.len();
        (0..n).filter_map(move |i| {
            let start = self.steps[i].0.max(lo);
            let stop = if i + 1 < n { self.steps[i + 1].0 } else { self.end }.min(hi);
            (stop > start).then_some((start, stop, self.steps[i].1))
        })
    }

    fn mean(&self, lo: f64, hi: f64) -> f64 {
        self.segments(lo, hi).map(|(a, b, c)| c * (b - a)).sum::<f64>() / (hi - lo)
    }

    /// Least-squares slope of the count against time over `[lo, hi]`.
    fn slope(&self, lo: f64, hi: f64) -> f64 {
        let mid = 0.5 * (lo + hi);
        let num: f64 = self
            .segments(lo, hi)
            .map(|(a, b, c)| 0.5 * c * ((b - mid).powi(2) - (a - mid).powi(2)))
            .sum();
        num / ((hi - lo).powi(3) / 12.0)
    }
}

fn run(config: &SimConfig, offered_rps: Option<f64>) -> Result<SimResult> {
    config.validate()?;
    let stream = offered_rps.map_or(0, f64::to_bits);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let mut engine = Engine {
        config,
        spec: config.spec(),
        rng,
        coverage: config.moe.map(|m| CoverageSampler::new(m.routing)),
    };
    let mut arrivals = match offered_rps {
        Some(rps) => {
            let mut arng = ChaCha8Rng::seed_from_u64(config.seed ^ ARRIVAL_SEED_MIX);
            arng.set_stream(stream);
            let exp = match config.arrival {
                ArrivalProcess::ConstantRate => None,
                ArrivalProcess::Poisson => Some(Exp::new(rps).map_err(|e| {
                    Error::Validation(format!("bad arrival rate {rps}: {e}"))
                })?),
            };
            Arrivals::Open {
                mean_gap: 1.0 / rps,
                exp,
                rng: arng,
                next: 0.0,
            }
        }
        None => Arrivals::Closed,
    };

    let g = config.workload.decode_tokens;
    let warmup = config.warmup_requests;
    let measured_end = warmup + config.measured_requests;
    let backlog_limit = 10 * measured_end + 1000;
    let cap = config.max_concurrency.unwrap_or(usize::MAX);

    let mut requests: Vec<Request> = Vec::new();
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut active: Vec<usize> = Vec::new();
    let mut in_system = 0usize;
    let mut measured_left = config.measured_requests;
    let mut aborted = false;
    let mut t = 0.0f64;
    let mut max_measured_latency = 0.0f64;
    // Open-loop runs continue past the last measured completion until the
    // run spans several latencies, so a short run is not mistaken for an
    // unbounded backlog while it is still filling up.
    let mut run_until = f64::INFINITY;

    let new_request = |requests: &mut Vec<Request>, arrival: f64| {
        requests.push(Request {
            arrival,
            completion: None,
            prefilled: false,
            tokens: 0,
            cycles: 0,
        });
        requests.len() - 1
    };

    while measured_left > 0 || t < run_until {
        match arrivals.peek() {
            Some(mut next) => {
                while next <= t {
                    let id = new_request(&mut requests, next);
                    queue.push_back(id);
                    in_system += 1;
                    next = arrivals.advance();
                }
            }
            None => {
                if in_system == 0 {
                    let id = new_request(&mut requests, t);
                    queue.push_back(id);
                    in_system += 1;
                }
            }
        }
        while active.len() < cap {
            match queue.pop_front() {
                Some(id) => active.push(id),
                None => break,
            }
        }
        if active.is_empty() {
            if let Some(next) = arrivals.peek() {
                t = t.max(next);
            }
            continue;
        }
        if in_system > backlog_limit {
            aborted = true;
            break;
        }

        let n_new = active.iter().filter(|&&i| !requests[i].prefilled).count();
        t += engine.iteration(active.len(), n_new);
        let mut finished = 0;
        for &i in &active {
            if !requests[i].prefilled {
                requests[i].prefilled = true;
                continue;
            }
            let got = engine.tokens_this_cycle();
            let r = &mut requests[i];
            r.tokens += got;
            r.cycles += 1;
            if r.tokens >= g {
                r.completion = Some(t);
                finished += 1;
                if (warmup..measured_end).contains(&i) {
                    measured_left -= 1;
                    max_measured_latency = max_measured_latency.max(t - r.arrival);
                }
            }
        }
        if finished > 0 {
            in_system -= finished;
            active.retain(|&i| requests[i].completion.is_none());
        }
        if measured_left == 0 && run_until.is_infinite() {
            run_until = match arrivals {
                Arrivals::Open { .. } => 3.0 * max_measured_latency,
                Arrivals::Closed => t,
            };
        }
    }

    summarize(config, offered_rps, &requests, t, aborted)
}

fn summarize(
    config: &SimConfig,
    offered_rps: Option<f64>,
    requests: &[Request],
    end: f64,
    aborted: bool,
) -> Result<SimResult> {
    let warmup = config.warmup_requests;
    let measured_end = (warmup + config.measured_requests).min(requests.len());
    let per_request: Vec<RequestRecord> = requests[warmup.min(measured_end)..measured_end]
        .iter()
        .filter_map(|r| {
            r.completion.map(|c| RequestRecord {
                arrival: r.arrival,
                completion: c,
                latency: c - r.arrival,
                tokens: r.tokens,
                cycles: r.cycles,
            })
        })
        .collect();
    if per_request.is_empty() {
        // Nothing measured finished before the backlog guard tripped.
        return Ok(SimResult {
            offered_rps,
            per_request,
            mean_latency: f64::INFINITY,
            p95_latency: f64::INFINITY,
            p99_latency: f64::INFINITY,
            time_avg_concurrency: f64::INFINITY,
            achieved_rps: 0.0,
            saturated: true,
            aborted,
        });
    }
    let mut lat: Vec<f64> = per_request.iter().map(|r| r.latency).collect();
    let mean_latency = lat.iter().sum::<f64>() / lat.len() as f64;
    lat.sort_by(f64::total_cmp);

    let series = InSystem::new(requests, end);
    let first = per_request[0].arrival;
    let last = per_request[per_request.len() - 1].arrival;
    let (lo, hi) = if last > first {
        (first, last)
    } else {
        (first, per_request[0].completion)
    };
    let (time_avg_concurrency, achieved_rps) = if hi > lo {
        let arrived = requests
            .iter()
            .filter(|r| r.arrival >= lo && r.arrival < hi)
            .count();
        (series.mean(lo, hi), arrived as f64 / (hi - lo))
    } else {
        // Zero-duration service: nothing is ever in the system.
        (0.0, offered_rps.unwrap_or(f64::INFINITY))
    };

    let tail_start = end * 2.0 / 3.0;
    let growing = end > tail_start && {
        let slope = series.slope(tail_start, end);
        let rise = slope * (end - tail_start);
        slope > SATURATION_SLOPE && rise > (0.1 * series.mean(tail_start, end)).max(1.0)
    };

    Ok(SimResult {
        offered_rps,
        per_request,
        mean_latency,
        p95_latency: percentile(&lat, 0.95),
        p99_latency: percentile(&lat, 0.99),
        time_avg_concurrency,
        achieved_rps,
        saturated: aborted || (offered_rps.is_some() && growing),
        aborted,
    })
}

/// Runs an open-loop simulation at `offered_rps` requests per second.
pub fn run_sim(config: &SimConfig, offered_rps: f64) -> Result<SimResult> {
    if !(offered_rps > 0.0 && offered_rps.is_finite()) {
        return Err(Error::Validation(format!(
            "offered rate must be finite and > 0, got {offered_rps}"
        )));
    }
    run(config, Some(offered_rps))
}

/// Runs the synchronous closed loop: one request in flight at a time, the
/// next arriving as the previous completes.
pub fn run_sync(config: &SimConfig) -> Result<SimResult> {
    run(config, None)
}
