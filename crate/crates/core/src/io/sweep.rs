use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{DecodingMode, LoadPoint, SweepDataset, WorkloadConfig};

pub const SWEEP_HEADER: [&str; 12] = [
    "model_id",
    "hardware_id",
    "prefill_tokens",
    "decode_tokens",
    "mode",
    "alpha",
    "draft_k",
    "rps",
    "mean_latency_s",
    "p95_latency_s",
    "p99_latency_s",
    "n_requests",
];

struct Row<'r> {
    record: &'r csv::StringRecord,
    line: usize,
}

impl Row<'_> {
    fn raw(&self, col: usize) -> &str {
        self.record.get(col).unwrap_or("").trim()
    }

    fn err(&self, col: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            column: SWEEP_HEADER[col].to_string(),
            message: message.into(),
        }
    }

    fn parse<T: std::str::FromStr>(&self, col: usize) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let s = self.raw(col);
        if s.is_empty() {
            return Err(self.err(col, "value is required"));
        }
        s.parse()
            .map_err(|e: T::Err| self.err(col, format!("cannot parse '{s}': {e}")))
    }

    fn optional<T: std::str::FromStr>(&self, col: usize) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(col).is_empty() {
            Ok(None)
        } else {
            self.parse(col).map(Some)
        }
    }
}

fn parse_row(row: &Row<'_>) -> Result<(WorkloadConfig, LoadPoint)> {
    if row.record.len() != SWEEP_HEADER.len() {
        return Err(Error::Parse {
            line: row.line,
            column: String::new(),
            message: format!(
                "expected {} fields, found {}",
                SWEEP_HEADER.len(),
                row.record.len()
            ),
        });
    }
    let mode = match row.raw(4) {
        "dense" => {
            if row.optional::<u32>(6)?.unwrap_or(0) != 0 {
                return Err(Error::Validation(format!(
                    "line {}: dense row has a non-zero draft_k",
                    row.line
                )));
            }
            DecodingMode::Dense
        }
        "sd" => {
            let alpha = row.optional(5)?.ok_or_else(|| {
                Error::Validation(format!("line {}: sd row is missing alpha", row.line))
            })?;
            let draft_k = row.optional(6)?.ok_or_else(|| {
                Error::Validation(format!("line {}: sd row is missing draft_k", row.line))
            })?;
            DecodingMode::Sd { alpha, draft_k }
        }
        other => return Err(row.err(4, format!("unknown mode '{other}' (expected dense or sd)"))),
    };
    let config = WorkloadConfig {
        model_id: row.raw(0).to_string(),
        hardware_id: row.raw(1).to_string(),
        prefill_tokens: row.parse(2)?,
        decode_tokens: row.parse(3)?,
        mode,
    };
    let point = LoadPoint {
        rps: row.parse(7)?,
        mean_latency: row.parse(8)?,
        p95_latency: row.optional(9)?,
        p99_latency: row.optional(10)?,
        n_requests: row.parse(11)?,
        saturated: false,
    };
    let located = |e: Error| match e {
        Error::Validation(m) => Error::Validation(format!("line {}: {m}", row.line)),
        e => e,
    };
    config.validate().map_err(located)?;
    point.validate().map_err(located)?;
    if point.rps == 0.0 {
        return Err(located(Error::Validation("rps must be > 0".into())));
    }
    Ok((config, point))
}

/// Parses sweep CSV text, grouping rows by workload configuration in order
/// of first appearance.
pub fn parse_sweep_csv<R: Read>(reader: R) -> Result<Vec<SweepDataset>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != SWEEP_HEADER {
        return Err(Error::Schema(format!(
            "sweep header must be '{}', found '{}'",
            SWEEP_HEADER.join(","),
            got.join(",")
        )));
    }
    let mut groups: IndexMap<_, (WorkloadConfig, Vec<LoadPoint>)> = IndexMap::new();
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let (config, point) = parse_row(&Row {
            record: &record,
            line,
        })?;
        groups
            .entry(config.key())
            .or_insert_with(|| (config, Vec::new()))
            .1
            .push(point);
    }
    Ok(groups
        .into_values()
        .map(|(config, points)| SweepDataset::new(config, points))
        .collect())
}

pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<SweepDataset>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_sweep_csv(file)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes datasets in the sweep schema, one row per point. Points flagged as
/// saturated are written like any other; callers decide whether to keep them.
pub fn write_sweep_csv_to<W: Write>(writer: W, datasets: &[SweepDataset]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(SWEEP_HEADER)?;
    for ds in datasets {
        let c = &ds.config;
        let (alpha, k) = match c.mode {
            DecodingMode::Dense => (String::new(), String::new()),
            DecodingMode::Sd { alpha, draft_k } => (alpha.to_string(), draft_k.to_string()),
        };
        for p in &ds.points {
            w.write_record([
                c.model_id.clone(),
                c.hardware_id.clone(),
                c.prefill_tokens.to_string(),
                c.decode_tokens.to_string(),
                c.mode.label().to_string(),
                alpha.clone(),
                k.clone(),
                p.rps.to_string(),
                p.mean_latency.to_string(),
                opt(p.p95_latency),
                opt(p.p99_latency),
                p.n_requests.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<sweep csv>", e))?;
    Ok(())
}

pub fn write_sweep_csv(path: impl AsRef<Path>, datasets: &[SweepDataset]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_sweep_csv_to(std::io::BufWriter::new(file), datasets)
}
