//! Discrete-event simulator of a continuous-batching server with optional
//! speculative decoding and expert routing.

mod engine;
mod sampling;
mod sweep;

pub use engine::{
    run_sim, run_sync, ArrivalProcess, MoeSaturation, PhaseCost, RequestRecord, SimConfig,
    SimResult, StepCosts,
};
pub use sampling::{sample_accepted, sample_expert_coverage, CoverageSampler};
pub use sweep::{find_max_stable_rate, find_max_stable_rate_with, RateSearch, run_sweep, run_sweep_detailed, SweepRun, SWEEP_RATES};
