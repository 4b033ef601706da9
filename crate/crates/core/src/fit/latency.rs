use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::fit::lm::{least_squares, Bounds, GradientContext, ParametricModel};
use crate::fit::{summarize, FitMetadata, FitOptions, FitResult, FitWarning, ParamSet};
use crate::model::{LatencyColumn, ServingCoefficients, SweepDataset};
use crate::spec::{expected_accept_length, SpecCostCoefficients, SpecParams};

/// Keeps `rps * c2` strictly below one at the highest observed rate.
const STABILITY_MARGIN: f64 = 1e-9;

/// Stable points of a dataset paired with the requested latency column.
pub(crate) fn observations(
    dataset: &SweepDataset,
    column: LatencyColumn,
) -> Result<(Vec<(f64, f64)>, usize)> {
    let mut out = Vec::with_capacity(dataset.points.len());
    let mut excluded = 0;
    for p in &dataset.points {
        if p.saturated {
            excluded += 1;
            continue;
        }
        let y = p.latency(column).ok_or_else(|| {
            Error::InsufficientData(format!(
                "{} latency missing at {} rps for {}",
                column.as_str(),
                p.rps,
                dataset.config
            ))
        })?;
        if !(y > 0.0 && y.is_finite()) {
            return Err(Error::Validation(format!(
                "{} latency {y} at {} rps must be positive",
                column.as_str(),
                p.rps
            )));
        }
        out.push((p.rps, y));
    }
    Ok((out, excluded))
}

/// `c1 / (1 - rps * c2)` with its exact gradient.
struct BasicLaw;

impl ParametricModel<f64> for BasicLaw {
    fn value(&self, rps: &f64, p: &[f64]) -> Option<f64> {
        let den = 1.0 - rps * p[1];
        (den > 0.0).then(|| p[0] / den)
    }

    fn gradient(&self, rps: &f64, p: &[f64], _: &GradientContext, grad: &mut [f64]) -> bool {
        let den = 1.0 - rps * p[1];
        if den <= 0.0 {
            return false;
        }
        grad[0] = 1.0 / den;
        grad[1] = p[0] * rps / (den * den);
        true
    }
}

/// Starting point for a two-coefficient fit: `c1` at the fastest observed
/// latency, `c2` chosen so the law passes through the slowest point.
pub(crate) fn basic_init(data: &[(f64, f64)], c2_upper: f64) -> [f64; 2] {
    let l_min = data.iter().map(|d| d.1).fold(f64::INFINITY, f64::min);
    let l_max = data.iter().map(|d| d.1).fold(0.0, f64::max);
    let rps_max = data.iter().map(|d| d.0).fold(0.0, f64::max);
    let c2 = if rps_max > 0.0 {
        ((1.0 - l_min / l_max) / rps_max).clamp(0.0, 0.5 * c2_upper)
    } else {
        0.0
    };
    [l_min, c2]
}

pub fn fit_basic(dataset: &SweepDataset, column: LatencyColumn) -> Result<FitResult<ServingCoefficients>> {
    fit_basic_with(dataset, column, &FitOptions::default())
}

pub fn fit_basic_with(
    dataset: &SweepDataset,
    column: LatencyColumn,
    options: &FitOptions,
) -> Result<FitResult<ServingCoefficients>> {
    let (data, excluded) = observations(dataset, column)?;
    if data.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "fitting c1/c2 needs at least 3 stable points, {} has {}",
            dataset.config,
            data.len()
        )));
    }
    let rps_max = data.iter().map(|d| d.0).fold(0.0, f64::max);
    let c2_upper = if rps_max > 0.0 {
        (1.0 - STABILITY_MARGIN) / rps_max
    } else {
        f64::INFINITY
    };
    let bounds = Bounds {
        lower: vec![f64::MIN_POSITIVE, 0.0],
        upper: vec![f64::INFINITY, c2_upper],
    };
    let init = basic_init(&data, c2_upper);
    let sol = least_squares(&BasicLaw, &data, &init, &bounds, options.residual_mode)?;
    let params = ServingCoefficients::from_slice(&sol.params);
    // Pinned against the bound: the top point sits a hair from saturation
    // and no stable (c1, c2) explains the sweep.
    if params.c2 >= c2_upper * (1.0 - 1e-6) {
        return Err(Error::Stability {
            rps: rps_max,
            saturation_rps: 1.0 / params.c2,
        });
    }

    let observed: Vec<f64> = data.iter().map(|d| d.1).collect();
    let predicted: Vec<f64> = data
        .iter()
        .map(|(rps, _)| params.c1 / (1.0 - rps * params.c2))
        .collect();
    let mut warnings = Vec::new();
    if excluded > 0 {
        warnings.push(FitWarning::SaturatedPointsExcluded(excluded));
    }
    let metadata = FitMetadata {
        residual_mode: options.residual_mode,
        init: init.to_vec(),
        bounds,
        starts: 1,
    };
    Ok(summarize(params, &observed, &predicted, &sol, column, warnings, metadata))
}

/// Input of one speculative observation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SpecInput {
    pub rps: f64,
    pub spec: SpecParams,
    pub g: u32,
}

impl SpecInput {
    /// `(g / E, k)` for this configuration.
    pub(crate) fn cycle_terms(&self) -> (f64, f64) {
        (
            f64::from(self.g) / expected_accept_length(&self.spec),
            f64::from(self.spec.k),
        )
    }
}

/// Effective-cost latency law over the six-coefficient split, with its exact
/// gradient.
struct SpecLaw;

impl ParametricModel<SpecInput> for SpecLaw {
    fn value(&self, x: &SpecInput, p: &[f64]) -> Option<f64> {
        let (q, k) = x.cycle_terms();
        let num = p[0] + q * (p[1] + k * p[2]);
        let den = 1.0 - x.rps * (p[3] + q * (p[4] + k * p[5]));
        (den > 0.0).then(|| num / den)
    }

    fn gradient(&self, x: &SpecInput, p: &[f64], _: &GradientContext, grad: &mut [f64]) -> bool {
        let (q, k) = x.cycle_terms();
        let num = p[0] + q * (p[1] + k * p[2]);
        let den = 1.0 - x.rps * (p[3] + q * (p[4] + k * p[5]));
        if den <= 0.0 {
            return false;
        }
        let a = 1.0 / den;
        let b = num * x.rps / (den * den);
        grad.copy_from_slice(&[a, a * q, a * q * k, b, b * q, b * q * k]);
        true
    }
}

/// Collects observations across an (alpha, k) grid that shares one prompt and
/// generation length.
pub(crate) fn spec_observations(
    datasets: &[SweepDataset],
    column: LatencyColumn,
) -> Result<(Vec<(SpecInput, f64)>, usize, Vec<FitWarning>)> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::InsufficientData("no datasets supplied".into()))?;
    let (g, prefill) = (first.config.decode_tokens, first.config.prefill_tokens);
    let mut data = Vec::new();
    let mut excluded = 0;
    let mut alphas = BTreeSet::new();
    let mut ks = BTreeSet::new();
    for ds in datasets {
        if ds.config.decode_tokens != g || ds.config.prefill_tokens != prefill {
            return Err(Error::Validation(format!(
                "all datasets must share prefill/decode lengths ({prefill}/{g}); {} differs",
                ds.config
            )));
        }
        let spec = ds.config.mode.spec_params();
        // Dense sweeps carry no acceptance rate of their own.
        if spec.k > 0 {
            alphas.insert(spec.alpha.to_bits());
        }
        ks.insert(spec.k);
        let (obs, ex) = observations(ds, column)?;
        excluded += ex;
        data.extend(obs.into_iter().map(|(rps, y)| (SpecInput { rps, spec, g }, y)));
    }
    let mut warnings = Vec::new();
    if ks.len() < 2 {
        warnings.push(FitWarning::Identifiability(format!(
            "only one draft length ({:?}) present; verify and draft costs cannot be separated",
            ks
        )));
    }
    if alphas.len() < 2 {
        warnings.push(FitWarning::Identifiability(
            "only one acceptance rate present; prefill and per-cycle costs are weakly separated"
                .into(),
        ));
    }
    if excluded > 0 {
        warnings.push(FitWarning::SaturatedPointsExcluded(excluded));
    }
    Ok((data, excluded, warnings))
}

/// Halves the load-dependent terms (listed by index) until every observation
/// is stable under `model`.
pub(crate) fn make_feasible<X>(
    model: &impl ParametricModel<X>,
    data: &[(X, f64)],
    init: &mut [f64],
    load_terms: &[usize],
) -> Result<()> {
    for _ in 0..200 {
        if data.iter().all(|(x, _)| model.value(x, init).is_some()) {
            return Ok(());
        }
        for &i in load_terms {
            init[i] *= 0.5;
        }
    }
    Err(Error::Validation(
        "could not find a stable starting point for the fit".into(),
    ))
}

/// Splits a two-coefficient fit of one configuration into the six-way cost
/// split: 10% prefill, 90% decode, drafter terms at 1% of verifier terms.
pub(crate) fn spec_init_from_basic(basic: &ServingCoefficients, input: &SpecInput) -> [f64; 6] {
    let (q, k) = input.cycle_terms();
    let per_verify = |c: f64| 0.9 * c / (q * (1.0 + 0.01 * k));
    let (v1, v2) = (per_verify(basic.c1), per_verify(basic.c2));
    [0.1 * basic.c1, v1, 0.01 * v1, 0.1 * basic.c2, v2, 0.01 * v2]
}

pub fn fit_spec(datasets: &[SweepDataset], column: LatencyColumn) -> Result<FitResult<SpecCostCoefficients>> {
    fit_spec_with(datasets, column, &FitOptions::default())
}

pub fn fit_spec_with(
    datasets: &[SweepDataset],
    column: LatencyColumn,
    options: &FitOptions,
) -> Result<FitResult<SpecCostCoefficients>> {
    let (data, _, warnings) = spec_observations(datasets, column)?;
    if data.len() < 6 {
        return Err(Error::InsufficientData(format!(
            "fitting six cost coefficients needs at least 6 stable points, got {}",
            data.len()
        )));
    }

    // Initialize from the configuration with the most usable points.
    let densest = datasets
        .iter()
        .enumerate()
        .max_by_key(|(i, ds)| (ds.stable_points().count(), std::cmp::Reverse(*i)))
        .map(|(_, ds)| ds)
        .expect("non-empty");
    let basic = match fit_basic_with(densest, column, options) {
        Ok(fit) => fit.params,
        Err(_) => {
            let (obs, _) = observations(densest, column)?;
            let [c1, c2] = basic_init(&obs, f64::INFINITY);
            ServingCoefficients { c1, c2 }
        }
    };
    let anchor = SpecInput {
        rps: 0.0,
        spec: densest.config.mode.spec_params(),
        g: densest.config.decode_tokens,
    };
    let mut init = spec_init_from_basic(&basic, &anchor);
    make_feasible(&SpecLaw, &data, &mut init, &[3, 4, 5])?;

    let bounds = Bounds::non_negative(6);
    let sol = least_squares(&SpecLaw, &data, &init, &bounds, options.residual_mode)?;
    let params = SpecCostCoefficients::from_slice(&sol.params);
    let observed: Vec<f64> = data.iter().map(|d| d.1).collect();
    let predicted: Vec<f64> = data
        .iter()
        .map(|(x, _)| SpecLaw.value(x, &sol.params).unwrap_or(f64::NAN))
        .collect();
    let metadata = FitMetadata {
        residual_mode: options.residual_mode,
        init: init.to_vec(),
        bounds,
        starts: 1,
    };
    Ok(summarize(params, &observed, &predicted, &sol, column, warnings, metadata))
}
