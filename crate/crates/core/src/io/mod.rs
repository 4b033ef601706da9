//! Sweep CSV files, coefficient documents, simulator configs and reports.

mod coeffs;
mod config;
pub mod report;
mod sweep;

pub use coeffs::{
    read_coefficients, write_coefficients, CoefficientDocument, Diagnostics, InputDigest,
    ModelKind, Provenance, WorkloadShape, DOCUMENT_VERSION, TOOL_VERSION,
};
pub use config::{parse_sim_config, read_sim_config, SimFile, SpecGrid};
pub use report::{
    collapse_report, ratio_minima_report, read_report, scaling_report, speedup_report,
    write_report, CollapseRow, LoadTrend, RatioMinimaRow, ReportKind, ScalingRow, SpeedupRow,
};
pub use sweep::{parse_sweep_csv, read_sweep_csv, write_sweep_csv, write_sweep_csv_to, SWEEP_HEADER};
