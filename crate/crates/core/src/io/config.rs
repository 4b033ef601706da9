use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecodingMode, WorkloadConfig};
use crate::sim::SimConfig;

/// Acceptance rates and draft lengths to sweep in addition to (or instead
/// of) the workload's own decoding mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecGrid {
    pub alphas: Vec<f64>,
    pub ks: Vec<u32>,
}

/// A simulator configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimFile {
    #[serde(flatten)]
    pub sim: SimConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec_grid: Option<SpecGrid>,
}

impl SimFile {
    /// One config per grid cell in (α, k) order, or the file's own config
    /// when there is no grid.
    pub fn expand(&self) -> Vec<SimConfig> {
        let Some(grid) = &self.spec_grid else {
            return vec![self.sim.clone()];
        };
        let mut out = Vec::with_capacity(grid.alphas.len() * grid.ks.len());
        for &alpha in &grid.alphas {
            for &draft_k in &grid.ks {
                let mut sim = self.sim.clone();
                sim.workload = WorkloadConfig {
                    mode: DecodingMode::Sd { alpha, draft_k },
                    ..self.sim.workload.clone()
                };
                out.push(sim);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for cfg in self.expand() {
            cfg.validate()?;
        }
        if let Some(g) = &self.spec_grid {
            if g.alphas.is_empty() || g.ks.is_empty() {
                return Err(Error::Validation("spec_grid needs at least one alpha and one k".into()));
            }
        }
        Ok(())
    }
}

pub fn parse_sim_config(text: &str) -> Result<SimFile> {
    let file: SimFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: format!("char {}", e.column()),
        message: e.to_string(),
    })?;
    file.validate()?;
    Ok(file)
}

pub fn read_sim_config(path: impl AsRef<Path>) -> Result<SimFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sim_config(&text)
}
