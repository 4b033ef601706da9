//! The `sdserve` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fit::{
    self, fit_basic_with, fit_moe_spec_with, fit_moe_with, fit_scaling_trend, fit_spec_with,
    leave_n_out, FitOptions, FitResult, ParamSet, Predictor, ResidualMode,
};
use crate::io::{
    read_coefficients, read_sim_config, read_sweep_csv, scaling_report, speedup_report,
    write_coefficients, write_report, write_sweep_csv, CoefficientDocument, InputDigest,
    LoadTrend, ModelKind, WorkloadShape,
};
use crate::model::{predict_latency, saturation_rate, LatencyColumn, ServingCoefficients, SweepDataset};
use crate::moe::{predict_moe_latency, predict_moe_sd_latency, MoeRouting};
use crate::sim::{run_sim, run_sweep_detailed, SimConfig, SimResult};
use crate::spec::{effective_coefficients, optimal_draft_length, predict_sd_latency, SpecParams};

/// Exit code for validation, parse and I/O failures.
pub const EXIT_ERROR: i32 = 1;
/// Exit code when `--strict` is set and a fit did not converge.
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "sdserve",
    version,
    about = "Latency models for speculative decoding under continuous-batching serving"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a latency law to a sweep CSV and write a coefficient document.
    Fit(FitArgs),
    /// Predict mean latency at a request rate from a coefficient document.
    Predict(PredictArgs),
    /// Speedup of a speculative configuration over dense decoding across load.
    Speedup(SpeedupArgs),
    /// Recommend the draft length with the lowest predicted latency.
    #[command(name = "optimize-k")]
    OptimizeK(OptimizeArgs),
    /// Simulate every configuration in a config file at one request rate.
    Simulate(SimulateArgs),
    /// Simulate the nine-point request-rate sweep for each configuration.
    Sweep(SweepArgs),
    /// Fit a linear trend of a coefficient against model or workload size.
    Scaling(ScalingArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Sweep CSV to fit.
    #[arg(long)]
    pub input: PathBuf,
    /// Latency law: eq1 (dense), eq3 (speculative), eq4 (MoE), eq5 (MoE speculative).
    #[arg(long, value_parser = parse_model_kind)]
    pub model: ModelKind,
    /// Latency statistic to fit.
    #[arg(long, default_value = "mean", value_parser = parse_column)]
    pub column: LatencyColumn,
    /// Expert routing as `m,M` (required for eq4 and eq5).
    #[arg(long, value_parser = parse_routing)]
    pub moe: Option<MoeRouting>,
    /// Where to write the coefficient document.
    #[arg(long)]
    pub output: PathBuf,
    /// Exit with status 2 when the optimizer does not converge.
    #[arg(long)]
    pub strict: bool,
    /// Weight residuals by the observed latency.
    #[arg(long)]
    pub relative: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Coefficient document.
    #[arg(long)]
    pub coeffs: PathBuf,
    /// Request rate in requests per second.
    #[arg(long)]
    pub rps: f64,
    /// Acceptance rate (eq3/eq5).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Draft length; 0 turns speculation off (eq3/eq5).
    #[arg(long)]
    pub k: Option<u32>,
    /// Generated tokens per request; defaults to the document's workload.
    #[arg(long)]
    pub g: Option<u32>,
}

#[derive(Debug, Args)]
pub struct SpeedupArgs {
    /// Coefficients of dense decoding (eq1, or eq3 evaluated at k = 0).
    #[arg(long)]
    pub dense: PathBuf,
    /// Coefficients of the speculative configuration (eq1, or eq3 with --alpha and --k).
    #[arg(long)]
    pub sd: PathBuf,
    /// Rates as `start:stop:n`, n evenly spaced points inclusive.
    #[arg(long)]
    pub rps_grid: String,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub k: Option<u32>,
    #[arg(long)]
    pub g: Option<u32>,
    /// Write the speedup CSV here instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Speculative (eq3) coefficient document.
    #[arg(long)]
    pub coeffs: PathBuf,
    #[arg(long)]
    pub alpha: f64,
    /// Generated tokens per request; defaults to the document's workload.
    #[arg(long)]
    pub g: Option<u32>,
    #[arg(long)]
    pub rps: f64,
    /// Largest draft length considered.
    #[arg(long, default_value_t = 10)]
    pub k_max: u32,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulator configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Offered request rate.
    #[arg(long)]
    pub rps: f64,
    /// Sweep CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Simulator configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Sweep CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScalingArgs {
    /// CSV with one row per configuration.
    #[arg(long)]
    pub coeff_table: PathBuf,
    /// verifier_params, drafter_params, prefill_tokens or effective_tokens.
    #[arg(long, value_parser = parse_predictor)]
    pub predictor: Predictor,
    /// Column holding the coefficient values.
    #[arg(long, default_value = "coefficient")]
    pub coefficient: String,
    /// Also report held-out r² leaving N configurations out.
    #[arg(long)]
    pub leave_n: Option<usize>,
    /// Write the scaling report CSV here.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn parse_model_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_column(s: &str) -> std::result::Result<LatencyColumn, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_predictor(s: &str) -> std::result::Result<Predictor, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_routing(s: &str) -> std::result::Result<MoeRouting, String> {
    let (m, total) = s
        .split_once(',')
        .ok_or_else(|| format!("expected m,M but got '{s}'"))?;
    let m = m.trim().parse().map_err(|e| format!("bad m '{m}': {e}"))?;
    let total = total.trim().parse().map_err(|e| format!("bad M '{total}': {e}"))?;
    MoeRouting::new(m, total).map_err(|e| e.to_string())
}

fn parse_grid(s: &str) -> std::result::Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [start, stop, n] = parts[..] else {
        return Err(format!("expected start:stop:n but got '{s}'"));
    };
    let start: f64 = start.parse().map_err(|e| format!("bad start '{start}': {e}"))?;
    let stop: f64 = stop.parse().map_err(|e| format!("bad stop '{stop}': {e}"))?;
    let n: usize = n.parse().map_err(|e| format!("bad n '{n}': {e}"))?;
    if n == 0 || !start.is_finite() || !stop.is_finite() || start < 0.0 || stop < start {
        return Err(format!("grid '{s}' needs 0 <= start <= stop and n >= 1"));
    }
    if n == 1 {
        return Ok(vec![start]);
    }
    let step = (stop - start) / (n - 1) as f64;
    Ok((0..n)
        .map(|i| if i == n - 1 { stop } else { start + step * i as f64 })
        .collect())
}

/// `x` with six significant digits, in fixed notation.
pub fn six_significant(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x:.5}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

fn spec_from(alpha: Option<f64>, k: Option<u32>) -> Result<SpecParams> {
    match (alpha, k) {
        (_, Some(0)) => Ok(SpecParams::off()),
        (Some(a), Some(k)) => SpecParams::new(a, k),
        _ => Err(Error::MissingInput(
            "speculative coefficients need --alpha and --k".into(),
        )),
    }
}

fn tokens_from(doc: &CoefficientDocument, g: Option<u32>) -> Result<u32> {
    g.or(doc.workload.map(|w| w.decode_tokens)).ok_or_else(|| {
        Error::MissingInput("pass --g: the document does not record its decode length".into())
    })
}

/// Dense-form coefficients from a document: eq1 directly, eq3 evaluated at
/// the given (or dense) speculation setting.
fn serving_from(
    doc: &CoefficientDocument,
    spec: Option<SpecParams>,
    g: Option<u32>,
) -> Result<ServingCoefficients> {
    match doc.model {
        ModelKind::Basic => doc.serving(),
        ModelKind::Speculative => {
            let costs = doc.spec_costs()?;
            let spec = spec.unwrap_or_else(SpecParams::off);
            Ok(effective_coefficients(&costs, &spec, tokens_from(doc, g)?))
        }
        other => Err(Error::Validation(format!(
            "{other} coefficients have no closed-form (c1, c2); use eq1 or eq3"
        ))),
    }
}

fn stability_message(c: &ServingCoefficients, rps: f64) -> Error {
    match saturation_rate(c) {
        Ok(sat) => Error::Stability {
            rps,
            saturation_rps: sat,
        },
        Err(e) => e,
    }
}

fn cmd_fit(a: &FitArgs) -> Result<i32> {
    let datasets = read_sweep_csv(&a.input)?;
    let options = FitOptions {
        residual_mode: if a.relative {
            ResidualMode::Relative
        } else {
            ResidualMode::Absolute
        },
    };
    let single = |what: &str| -> Result<&SweepDataset> {
        match datasets.as_slice() {
            [one] => Ok(one),
            [] => Err(Error::InsufficientData(format!("{} holds no rows", a.input.display()))),
            many => Err(Error::Validation(format!(
                "{what} fits one configuration but {} holds {}",
                a.input.display(),
                many.len()
            ))),
        }
    };
    let routing = || {
        a.moe.ok_or_else(|| {
            Error::MissingInput(format!("--moe m,M is required for {}", a.model))
        })
    };
    fn finish<P: ParamSet>(kind: ModelKind, fit: &FitResult<P>) -> (CoefficientDocument, String) {
        let mut out = String::new();
        for (name, v) in fit.named_params() {
            let _ = writeln!(out, "{name} = {v}");
        }
        (CoefficientDocument::from_fit(kind, fit), out)
    }
    let (mut doc, params_text, converged) = match a.model {
        ModelKind::Basic => {
            let f = fit_basic_with(single("eq1")?, a.column, &options)?;
            warn(&f.warnings);
            let (d, t) = finish(a.model, &f);
            (d, t, f.converged)
        }
        ModelKind::Speculative => {
            let f = fit_spec_with(&datasets, a.column, &options)?;
            warn(&f.warnings);
            let (d, t) = finish(a.model, &f);
            (d, t, f.converged)
        }
        ModelKind::Moe => {
            let r = routing()?;
            let f = fit_moe_with(single("eq4")?, &r, a.column, &options)?;
            warn(&f.warnings);
            let (mut d, t) = finish(a.model, &f);
            d.routing = Some(r);
            (d, t, f.converged)
        }
        ModelKind::MoeSpeculative => {
            let r = routing()?;
            let f = fit_moe_spec_with(&datasets, &r, a.column, &options)?;
            warn(&f.warnings);
            let (mut d, t) = finish(a.model, &f);
            d.routing = Some(r);
            (d, t, f.converged)
        }
    };
    if let Some(first) = datasets.first() {
        doc.workload = Some(WorkloadShape {
            prefill_tokens: first.config.prefill_tokens,
            decode_tokens: first.config.decode_tokens,
        });
    }
    doc.provenance.inputs.push(InputDigest::of_file(&a.input)?);
    write_coefficients(&doc, &a.output)?;

    let d = doc.diagnostics.as_ref().expect("fit documents carry diagnostics");
    print!("{params_text}");
    println!("r2 = {}", d.r2);
    println!("rmse = {} s", d.rmse);
    println!("n_points = {}", d.n_points);
    println!("converged = {} ({} iterations)", d.converged, d.iterations);
    if !converged {
        eprintln!("warning: the optimizer stopped before converging");
        if a.strict {
            return Ok(EXIT_NOT_CONVERGED);
        }
    }
    Ok(0)
}

fn warn(warnings: &[fit::FitWarning]) {
    for w in warnings {
        eprintln!("{w}");
    }
}

fn cmd_predict(a: &PredictArgs) -> Result<i32> {
    let doc = read_coefficients(&a.coeffs)?;
    let latency = match doc.model {
        ModelKind::Basic => {
            let c = doc.serving()?;
            predict_latency(&c, a.rps).map_err(|_| stability_message(&c, a.rps))?
        }
        ModelKind::Speculative => {
            let spec = spec_from(a.alpha, a.k)?;
            let g = tokens_from(&doc, a.g)?;
            let costs = doc.spec_costs()?;
            predict_sd_latency(&costs, &spec, g, a.rps).map_err(|_| {
                stability_message(&effective_coefficients(&costs, &spec, g), a.rps)
            })?
        }
        ModelKind::Moe => {
            let (c, r) = doc.moe()?;
            predict_moe_latency(&c, &r, a.rps)?
        }
        ModelKind::MoeSpeculative => {
            let spec = spec_from(a.alpha, a.k)?;
            let g = tokens_from(&doc, a.g)?;
            let (c, r) = doc.moe_spec()?;
            predict_moe_sd_latency(&c, &r, &spec, g, a.rps)?
        }
    };
    println!("{}", six_significant(latency));
    Ok(0)
}

fn cmd_speedup(a: &SpeedupArgs) -> Result<i32> {
    let dense_doc = read_coefficients(&a.dense)?;
    let sd_doc = read_coefficients(&a.sd)?;
    let dense = serving_from(&dense_doc, None, a.g)?;
    let sd_spec = match sd_doc.model {
        ModelKind::Speculative => Some(spec_from(a.alpha, a.k)?),
        _ => None,
    };
    let sd = serving_from(&sd_doc, sd_spec, a.g)?;
    let grid = parse_grid(&a.rps_grid).map_err(Error::Validation)?;
    for &rps in &grid {
        for c in [&dense, &sd] {
            if predict_latency(c, rps).is_err() {
                return Err(stability_message(c, rps));
            }
        }
    }
    let rows = speedup_report(&dense, &sd, &grid)?;
    match &a.output {
        Some(path) => {
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            write_report(std::io::BufWriter::new(file), &rows)?;
        }
        None => write_report(std::io::stdout().lock(), &rows)?,
    }
    println!("{}", LoadTrend::of(&dense, &sd)?.summary());
    Ok(0)
}

fn cmd_optimize(a: &OptimizeArgs) -> Result<i32> {
    let doc = read_coefficients(&a.coeffs)?;
    let costs = doc.spec_costs()?;
    let g = tokens_from(&doc, a.g)?;
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(Error::Validation(format!("alpha {} outside [0, 1]", a.alpha)));
    }
    let (k, latency) = optimal_draft_length(&costs, a.alpha, g, a.rps, a.k_max)?;
    if k == 0 {
        println!("k* = 0 (speculation off)");
    } else {
        println!("k* = {k}");
    }
    println!("predicted latency = {} s", six_significant(latency));
    Ok(0)
}

fn littles_law_line(config: &SimConfig, r: &SimResult) -> String {
    let expected = r.achieved_rps * r.mean_latency;
    let mut line = format!(
        "{}: rps={} L={} s B={} rps*L={} error={:.3}%",
        config.workload,
        r.offered_rps.map_or_else(|| "sync".to_string(), |x| x.to_string()),
        six_significant(r.mean_latency),
        six_significant(r.time_avg_concurrency),
        six_significant(expected),
        100.0 * r.littles_law_error()
    );
    if r.saturated {
        line.push_str(" SATURATED");
    }
    line
}

fn cmd_simulate(a: &SimulateArgs) -> Result<i32> {
    let file = read_sim_config(&a.config)?;
    let configs = file.expand();
    let results: Vec<SimResult> = configs
        .par_iter()
        .map(|c| run_sim(c, a.rps))
        .collect::<Result<_>>()?;
    let mut datasets = Vec::new();
    for (c, r) in configs.iter().zip(&results) {
        println!("{}", littles_law_line(c, r));
        if r.saturated {
            eprintln!("{}: saturated at rps={}, left out of {}", c.workload, a.rps, a.out.display());
        } else {
            datasets.push(SweepDataset::new(c.workload.clone(), vec![r.to_load_point()]));
        }
    }
    write_sweep_csv(&a.out, &datasets)?;
    Ok(0)
}

fn cmd_sweep(a: &SweepArgs) -> Result<i32> {
    let file = read_sim_config(&a.config)?;
    let configs = file.expand();
    let sweeps = configs
        .iter()
        .map(run_sweep_detailed)
        .collect::<Result<Vec<_>>>()?;
    let mut datasets = Vec::new();
    for (c, s) in configs.iter().zip(&sweeps) {
        println!("{}: stable ceiling {} rps", c.workload, six_significant(s.ceiling));
        for r in &s.runs {
            println!("{}", littles_law_line(c, r));
        }
        let kept: Vec<_> = s.dataset.stable_points().cloned().collect();
        let dropped = s.dataset.points.len() - kept.len();
        if dropped > 0 {
            eprintln!(
                "{}: {dropped} saturated point(s) left out of {}",
                c.workload,
                a.out.display()
            );
        }
        datasets.push(SweepDataset::new(c.workload.clone(), kept));
    }
    write_sweep_csv(&a.out, &datasets)?;
    Ok(0)
}

/// Reads `(predictor, coefficient)` pairs from a coefficient table.
pub fn read_coeff_table(
    path: &Path,
    predictor: Predictor,
    coefficient: &str,
) -> Result<Vec<(f64, f64)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let coef_col = col(coefficient).ok_or_else(|| {
        Error::Schema(format!("{} has no '{coefficient}' column", path.display()))
    })?;
    enum Source {
        Column(usize),
        Effective(usize, usize),
    }
    let source = match (col(predictor.as_str()), predictor) {
        (Some(i), _) => Source::Column(i),
        (None, Predictor::EffectiveTokens) => match (col("prefill_tokens"), col("decode_tokens")) {
            (Some(p), Some(d)) => Source::Effective(p, d),
            _ => {
                return Err(Error::Schema(format!(
                    "{} needs an effective_tokens column or prefill_tokens and decode_tokens",
                    path.display()
                )))
            }
        },
        (None, _) => {
            return Err(Error::Schema(format!(
                "{} has no '{predictor}' column",
                path.display()
            )))
        }
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let num = |i: usize| -> Result<f64> {
            let raw = rec.get(i).unwrap_or("").trim();
            raw.parse().map_err(|e| Error::Parse {
                line,
                column: headers.get(i).unwrap_or("").to_string(),
                message: format!("cannot parse '{raw}': {e}"),
            })
        };
        let x = match source {
            Source::Column(i) => num(i)?,
            Source::Effective(p, d) => fit::effective_token_count(num(p)?, num(d)?),
        };
        out.push((x, num(coef_col)?));
    }
    Ok(out)
}

fn cmd_scaling(a: &ScalingArgs) -> Result<i32> {
    let points = read_coeff_table(&a.coeff_table, a.predictor, &a.coefficient)?;
    let trend = fit_scaling_trend(&points, a.predictor)?;
    println!(
        "{} vs {}: slope = {}, intercept = {}, r2 = {}",
        a.coefficient, a.predictor, trend.slope, trend.intercept, trend.r2
    );
    if let Some(n) = a.leave_n {
        let s = leave_n_out(&points, n, a.predictor)?;
        println!(
            "leave-{n}-out over {} {} folds: pooled r2 = {}, mean fold r2 = {}, min fold r2 = {}",
            s.folds,
            if s.sampled { "sampled" } else { "enumerated" },
            s.pooled_r2,
            s.mean_fold_r2,
            s.min_fold_r2
        );
    }
    if let Some(path) = &a.output {
        let rows = scaling_report(&trend, &points)?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        write_report(std::io::BufWriter::new(file), &rows)?;
    }
    Ok(0)
}

pub fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Speedup(a) => cmd_speedup(a),
        Command::OptimizeK(a) => cmd_optimize(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Scaling(a) => cmd_scaling(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(code) => {
            let _ = std::io::stdout().flush();
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(six_significant(4.0), "4.00000");
        assert_eq!(six_significant(0.0123456789), "0.0123457");
        assert_eq!(six_significant(123456.7), "123457");
        assert_eq!(six_significant(12.5), "12.5000");
    }

    #[test]
    fn grids() {
        assert_eq!(parse_grid("0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_grid("2:2:1").unwrap(), vec![2.0]);
        assert!(parse_grid("1:0:3").is_err());
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("0:1:0").is_err());
    }

    #[test]
    fn routing_flag() {
        let r = parse_routing("8,128").unwrap();
        assert_eq!((r.active, r.total), (8, 128));
        assert!(parse_routing("9,8").is_err());
        assert!(parse_routing("8").is_err());
    }

    #[test]
    fn spec_flags() {
        assert_eq!(spec_from(None, Some(0)).unwrap(), SpecParams::off());
        assert!(spec_from(Some(0.5), None).is_err());
        assert_eq!(spec_from(Some(0.5), Some(3)).unwrap().k, 3);
    }
}
