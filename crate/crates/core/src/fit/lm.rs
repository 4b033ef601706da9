//! Bounded Levenberg–Marquardt least squares.
//!
//! Minimizes `½ Σ r_i(p)²` where `r_i = model(x_i, p) - y_i` (optionally
//! divided by `y_i`). Bounds are enforced by clamping each trial point and by
//! freezing parameters that sit on a bound while the gradient pushes them
//! outward, so the Jacobian stays in natural units.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative parameter-change convergence threshold.
pub const PARAM_TOLERANCE: f64 = 1e-10;
/// Relative cost-change convergence threshold.
pub const COST_TOLERANCE: f64 = 1e-12;
pub const MAX_ITERATIONS: usize = 10_000;

const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e16;
const LAMBDA_MIN: f64 = 1e-12;

/// How residuals are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualMode {
    /// `predicted - observed`, in seconds.
    #[default]
    Absolute,
    /// `(predicted - observed) / observed`.
    Relative,
}

/// A scalar model `y = f(x; p)`. Returning `None` marks `p` as outside the
/// model's domain (for latency laws: past saturation at `x`).
pub trait ParametricModel<X> {
    fn value(&self, x: &X, params: &[f64]) -> Option<f64>;

    /// Writes `∂f/∂p` into `grad`. The default uses central differences,
    /// falling back to one-sided steps near a bound or the model's domain edge.
    fn gradient(&self, x: &X, params: &[f64], ctx: &GradientContext, grad: &mut [f64]) -> bool {
        numeric_gradient(|p| self.value(x, p), params, ctx, grad)
    }
}

/// Adapts a closure into a [`ParametricModel`] with numeric derivatives.
pub struct FnModel<F>(pub F);

impl<X, F> ParametricModel<X> for FnModel<F>
where
    F: Fn(&X, &[f64]) -> Option<f64>,
{
    fn value(&self, x: &X, params: &[f64]) -> Option<f64> {
        (self.0)(x, params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Bounds {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn non_negative(n: usize) -> Self {
        Bounds {
            lower: vec![0.0; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    fn clamp(&self, p: &mut [f64]) {
        for (i, v) in p.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }
}

/// Bounds and per-parameter magnitudes used to size finite-difference steps.
#[derive(Debug, Clone)]
pub struct GradientContext {
    pub bounds: Bounds,
    /// Step sizes scale with `max(|p_i|, typical[i])`.
    pub typical: Vec<f64>,
}

fn numeric_gradient(
    f: impl Fn(&[f64]) -> Option<f64>,
    params: &[f64],
    ctx: &GradientContext,
    grad: &mut [f64],
) -> bool {
    let mut p = params.to_vec();
    let f0 = f(params);
    for i in 0..params.len() {
        let h = f64::EPSILON.cbrt() * params[i].abs().max(ctx.typical[i]);
        let (lo, hi) = (ctx.bounds.lower[i], ctx.bounds.upper[i]);
        let up = params[i] + h <= hi;
        let down = params[i] - h >= lo;
        let eval = |p: &mut Vec<f64>, v: f64| {
            p[i] = v;
            let out = f(p);
            p[i] = params[i];
            out
        };
        let fp = if up { eval(&mut p, params[i] + h) } else { None };
        let fm = if down { eval(&mut p, params[i] - h) } else { None };
        grad[i] = match (fp, fm, f0) {
            (Some(a), Some(b), _) => (a - b) / (2.0 * h),
            (Some(a), None, Some(c)) => (a - c) / h,
            (None, Some(b), Some(c)) => (c - b) / h,
            _ => return false,
        };
    }
    true
}

/// Raw optimizer output.
#[derive(Debug, Clone, PartialEq)]
pub struct LsqSolution {
    pub params: Vec<f64>,
    /// `½ Σ r²` at `params`.
    pub cost: f64,
    /// Weighted residuals at `params`.
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

struct Problem<'a, X, M> {
    model: &'a M,
    data: &'a [(X, f64)],
    ctx: GradientContext,
    mode: ResidualMode,
}

impl<X, M: ParametricModel<X>> Problem<'_, X, M> {
    fn weight(&self, y: f64) -> f64 {
        match self.mode {
            ResidualMode::Absolute => 1.0,
            ResidualMode::Relative => 1.0 / y,
        }
    }

    fn residuals(&self, p: &[f64]) -> Option<DVector<f64>> {
        let mut r = DVector::zeros(self.data.len());
        for (i, (x, y)) in self.data.iter().enumerate() {
            let v = self.model.value(x, p)?;
            if !v.is_finite() {
                return None;
            }
            r[i] = (v - y) * self.weight(*y);
        }
        Some(r)
    }

    fn jacobian(&self, p: &[f64]) -> Option<DMatrix<f64>> {
        let n = p.len();
        let mut jac = DMatrix::zeros(self.data.len(), n);
        let mut grad = vec![0.0; n];
        for (i, (x, y)) in self.data.iter().enumerate() {
            if !self.model.gradient(x, p, &self.ctx, &mut grad) {
                return None;
            }
            let w = self.weight(*y);
            for j in 0..n {
                if !grad[j].is_finite() {
                    return None;
                }
                jac[(i, j)] = grad[j] * w;
            }
        }
        Some(jac)
    }
}

/// Fits `model` to `(input, observed)` pairs starting from `init`.
///
/// Converges when the relative parameter change drops below `1e-10` or the
/// relative cost change below `1e-12`. Running out of iterations is not an
/// error: the best parameters so far come back with `converged = false`.
pub fn least_squares<X, M: ParametricModel<X>>(
    model: &M,
    data: &[(X, f64)],
    init: &[f64],
    bounds: &Bounds,
    mode: ResidualMode,
) -> Result<LsqSolution> {
    let n = init.len();
    if bounds.lower.len() != n || bounds.upper.len() != n {
        return Err(Error::Validation("bounds length does not match parameters".into()));
    }
    if data.len() < n {
        return Err(Error::InsufficientData(format!(
            "{} observations for {n} parameters",
            data.len()
        )));
    }
    if mode == ResidualMode::Relative && data.iter().any(|(_, y)| *y == 0.0) {
        return Err(Error::Validation("relative residuals need non-zero observations".into()));
    }
    for i in 0..n {
        if !(bounds.lower[i] <= init[i] && init[i] <= bounds.upper[i]) {
            return Err(Error::Validation(format!(
                "initial parameter {i} = {} outside [{}, {}]",
                init[i], bounds.lower[i], bounds.upper[i]
            )));
        }
    }
    let problem = Problem {
        model,
        data,
        ctx: GradientContext {
            bounds: bounds.clone(),
            typical: init.iter().map(|v| v.abs().max(1e-12)).collect(),
        },
        mode,
    };

    let mut p = init.to_vec();
    let mut r = problem
        .residuals(&p)
        .ok_or_else(|| Error::Validation("model undefined at the initial parameters".into()))?;
    let mut cost = 0.5 * r.norm_squared();
    let mut lambda = LAMBDA_INIT;
    let mut converged = cost == 0.0;
    let mut iterations = 0;

    while !converged && iterations < MAX_ITERATIONS {
        iterations += 1;
        let jac = problem.jacobian(&p).ok_or_else(|| {
            Error::SingularJacobian(format!("non-finite derivatives at {p:?}"))
        })?;
        if iterations == 1 && jac.iter().all(|v| *v == 0.0) {
            return Err(Error::SingularJacobian(
                "residuals do not depend on any parameter".into(),
            ));
        }
        let grad = jac.tr_mul(&r);
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let pinned_low = p[i] <= bounds.lower[i] && grad[i] > 0.0;
                let pinned_high = p[i] >= bounds.upper[i] && grad[i] < 0.0;
                !(pinned_low || pinned_high)
            })
            .collect();
        if free.is_empty() || free.iter().all(|&i| grad[i] == 0.0) {
            converged = true;
            break;
        }

        let jf = jac.select_columns(&free);
        let a = jf.tr_mul(&jf);
        let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| grad[i]));
        let diag_floor = a.diagonal().max() * 1e-15;

        let mut accepted = false;
        while lambda <= LAMBDA_MAX {
            let mut m = a.clone();
            for i in 0..free.len() {
                m[(i, i)] += lambda * a[(i, i)].max(diag_floor).max(f64::MIN_POSITIVE);
            }
            let Some(chol) = m.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&gf));
            let mut trial = p.clone();
            for (j, &i) in free.iter().enumerate() {
                trial[i] += step[j];
            }
            bounds.clamp(&mut trial);
            if trial == p {
                lambda *= 10.0;
                continue;
            }
            let Some(r_new) = problem.residuals(&trial) else {
                lambda *= 10.0;
                continue;
            };
            let cost_new = 0.5 * r_new.norm_squared();
            if cost_new < cost {
                let dp: f64 = trial
                    .iter()
                    .zip(&p)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let pn: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                let rel_cost = (cost - cost_new) / cost;
                p = trial;
                r = r_new;
                cost = cost_new;
                lambda = (lambda / 10.0).max(LAMBDA_MIN);
                accepted = true;
                if cost == 0.0 || dp <= PARAM_TOLERANCE * (pn + PARAM_TOLERANCE) || rel_cost <= COST_TOLERANCE
                {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No descent direction survives at machine precision.
            converged = true;
        }
    }

    Ok(LsqSolution {
        params: p,
        cost,
        residuals: r.iter().copied().collect(),
        converged,
        iterations,
    })
}
