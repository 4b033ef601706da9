use crate::error::{Error, Result};
use crate::fit::latency::{fit_basic_with, fit_spec_with, make_feasible, observations, spec_observations, SpecInput};
use crate::fit::lm::{least_squares, Bounds, LsqSolution, ParametricModel};
use crate::fit::{summarize, FitMetadata, FitOptions, FitResult, FitWarning, ParamSet};
use crate::model::{LatencyColumn, SweepDataset};
use crate::moe::{
    predict_moe_latency, predict_moe_sd_latency, MoeCoefficients, MoeRouting, MoeSpecCoefficients,
};

/// Scale factors applied to the saturation increments of the starting point;
/// the lowest-cost converged start wins.
pub const MULTI_START_FACTORS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

struct MoeLaw {
    routing: MoeRouting,
}

impl ParametricModel<f64> for MoeLaw {
    fn value(&self, rps: &f64, p: &[f64]) -> Option<f64> {
        predict_moe_latency(&MoeCoefficients::from_slice(p), &self.routing, *rps).ok()
    }
}

struct MoeSpecLaw {
    routing: MoeRouting,
}

impl ParametricModel<SpecInput> for MoeSpecLaw {
    fn value(&self, x: &SpecInput, p: &[f64]) -> Option<f64> {
        predict_moe_sd_latency(
            &MoeSpecCoefficients::from_slice(p),
            &self.routing,
            &x.spec,
            x.g,
            x.rps,
        )
        .ok()
    }
}

fn identifiability(routing: &MoeRouting) -> Option<FitWarning> {
    (routing.active == routing.total).then(|| {
        FitWarning::Identifiability(format!(
            "every token reaches all {} experts, so coverage is constant and the \
             low-coverage/saturation split is not identifiable",
            routing.total
        ))
    })
}

/// Runs one fit per start and keeps the lowest-cost result, preferring
/// converged ones.
fn multi_start<X, M: ParametricModel<X>>(
    model: &M,
    data: &[(X, f64)],
    inits: Vec<Vec<f64>>,
    bounds: &Bounds,
    options: &FitOptions,
) -> Result<(LsqSolution, Vec<f64>)> {
    let mut best: Option<(LsqSolution, Vec<f64>)> = None;
    let mut last_err = None;
    for init in inits {
        match least_squares(model, data, &init, bounds, options.residual_mode) {
            Ok(sol) => {
                let better = match &best {
                    None => true,
                    Some((b, _)) => {
                        (sol.converged && !b.converged)
                            || (sol.converged == b.converged && sol.cost < b.cost)
                    }
                };
                if better {
                    best = Some((sol, init));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::InsufficientData("no starts".into())))
}

pub fn fit_moe(
    dataset: &SweepDataset,
    routing: &MoeRouting,
    column: LatencyColumn,
) -> Result<FitResult<MoeCoefficients>> {
    fit_moe_with(dataset, routing, column, &FitOptions::default())
}

pub fn fit_moe_with(
    dataset: &SweepDataset,
    routing: &MoeRouting,
    column: LatencyColumn,
    options: &FitOptions,
) -> Result<FitResult<MoeCoefficients>> {
    let basic = fit_basic_with(dataset, column, options)?;
    let (data, _) = observations(dataset, column)?;
    if data.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "fitting four MoE coefficients needs at least 4 stable points, got {}",
            data.len()
        )));
    }
    let model = MoeLaw { routing: *routing };
    let c = basic.params;
    let mut inits = Vec::new();
    for f in MULTI_START_FACTORS {
        let mut init = vec![c.c1, 0.1 * f * c.c1, c.c2, 0.1 * f * c.c2];
        make_feasible(&model, &data, &mut init, &[2, 3])?;
        inits.push(init);
    }
    let bounds = Bounds {
        lower: vec![f64::MIN_POSITIVE, 0.0, 0.0, 0.0],
        upper: vec![f64::INFINITY; 4],
    };
    let (sol, init) = multi_start(&model, &data, inits, &bounds, options)?;
    let params = MoeCoefficients::from_slice(&sol.params);
    let observed: Vec<f64> = data.iter().map(|d| d.1).collect();
    let predicted = data
        .iter()
        .map(|(rps, _)| predict_moe_latency(&params, routing, *rps))
        .collect::<Result<Vec<_>>>()?;
    let mut warnings = basic.warnings;
    warnings.extend(identifiability(routing));
    let metadata = FitMetadata {
        residual_mode: options.residual_mode,
        init,
        bounds,
        starts: MULTI_START_FACTORS.len(),
    };
    Ok(summarize(params, &observed, &predicted, &sol, column, warnings, metadata))
}

pub fn fit_moe_spec(
    datasets: &[SweepDataset],
    routing: &MoeRouting,
    column: LatencyColumn,
) -> Result<FitResult<MoeSpecCoefficients>> {
    fit_moe_spec_with(datasets, routing, column, &FitOptions::default())
}

pub fn fit_moe_spec_with(
    datasets: &[SweepDataset],
    routing: &MoeRouting,
    column: LatencyColumn,
    options: &FitOptions,
) -> Result<FitResult<MoeSpecCoefficients>> {
    let base = fit_spec_with(datasets, column, options)?;
    let (data, _, _) = spec_observations(datasets, column)?;
    if data.len() < 8 {
        return Err(Error::InsufficientData(format!(
            "fitting eight MoE cost coefficients needs at least 8 stable points, got {}",
            data.len()
        )));
    }
    let model = MoeSpecLaw { routing: *routing };
    let c = base.params;
    let mut inits = Vec::new();
    for f in MULTI_START_FACTORS {
        let mut init = vec![
            c.c1p,
            c.c1v,
            0.1 * f * c.c1v,
            c.c1d,
            c.c2p,
            c.c2v,
            0.1 * f * c.c2v,
            c.c2d,
        ];
        // Zero-valued starts would pin the finite-difference step at the floor.
        for v in init.iter_mut() {
            if *v == 0.0 {
                *v = 1e-9;
            }
        }
        make_feasible(&model, &data, &mut init, &[4, 5, 6, 7])?;
        inits.push(init);
    }
    let bounds = Bounds::non_negative(8);
    let (sol, init) = multi_start(&model, &data, inits, &bounds, options)?;
    let params = MoeSpecCoefficients::from_slice(&sol.params);
    let observed: Vec<f64> = data.iter().map(|d| d.1).collect();
    let predicted = data
        .iter()
        .map(|(x, _)| predict_moe_sd_latency(&params, routing, &x.spec, x.g, x.rps))
        .collect::<Result<Vec<_>>>()?;
    let mut warnings = base.warnings;
    warnings.extend(identifiability(routing));
    let metadata = FitMetadata {
        residual_mode: options.residual_mode,
        init,
        bounds,
        starts: MULTI_START_FACTORS.len(),
    };
    Ok(summarize(params, &observed, &predicted, &sol, column, warnings, metadata))
}
