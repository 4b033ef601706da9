use std::fmt;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fit::{FitResult, ParamSet};
use crate::model::{LatencyColumn, ServingCoefficients};
use crate::moe::{MoeCoefficients, MoeRouting, MoeSpecCoefficients};
use crate::spec::SpecCostCoefficients;

pub const DOCUMENT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = concat!("sdserve ", env!("CARGO_PKG_VERSION"));

/// Which latency law a document's parameters belong to. The serialized
/// tokens are part of the file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    /// `L = c1 / (1 - rps * c2)`.
    #[serde(rename = "eq1")]
    Basic,
    /// Per-phase costs of speculative decoding.
    #[serde(rename = "eq3")]
    Speculative,
    /// Dense law with expert-coverage terms.
    #[serde(rename = "eq4")]
    Moe,
    /// Speculative law with expert-coverage terms on the verifier.
    #[serde(rename = "eq5")]
    MoeSpeculative,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Basic,
        ModelKind::Speculative,
        ModelKind::Moe,
        ModelKind::MoeSpeculative,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Basic => "eq1",
            ModelKind::Speculative => "eq3",
            ModelKind::Moe => "eq4",
            ModelKind::MoeSpeculative => "eq5",
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            ModelKind::Basic => ServingCoefficients::NAMES,
            ModelKind::Speculative => SpecCostCoefficients::NAMES,
            ModelKind::Moe => MoeCoefficients::NAMES,
            ModelKind::MoeSpeculative => MoeSpecCoefficients::NAMES,
        }
    }

    pub fn needs_routing(&self) -> bool {
        matches!(self, ModelKind::Moe | ModelKind::MoeSpeculative)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Version(format!("unknown model kind '{s}'")))
    }
}

/// Prompt and generation lengths the coefficients were fitted at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadShape {
    pub prefill_tokens: u32,
    pub decode_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub r2: f64,
    pub rmse: f64,
    pub n_points: usize,
    pub latency_column: LatencyColumn,
    pub converged: bool,
    pub iterations: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

impl InputDigest {
    pub fn of_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(InputDigest {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default)]
    pub inputs: Vec<InputDigest>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub tool_version: String,
}

impl Default for Provenance {
    fn default() -> Self {
        Provenance {
            inputs: Vec::new(),
            seed: None,
            tool_version: TOOL_VERSION.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientDocument {
    pub version: u32,
    pub model: ModelKind,
    pub parameters: IndexMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<MoeRouting>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<WorkloadShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl CoefficientDocument {
    pub fn new<P: ParamSet>(model: ModelKind, params: &P) -> Self {
        debug_assert_eq!(model.param_names(), P::NAMES);
        CoefficientDocument {
            version: DOCUMENT_VERSION,
            model,
            parameters: P::NAMES.iter().map(|n| n.to_string()).zip(params.to_vec()).collect(),
            routing: None,
            workload: None,
            diagnostics: None,
            provenance: Provenance::default(),
        }
    }

    pub fn from_fit<P: ParamSet>(model: ModelKind, fit: &FitResult<P>) -> Self {
        let mut doc = CoefficientDocument::new(model, &fit.params);
        doc.diagnostics = Some(Diagnostics {
            r2: fit.r2,
            rmse: fit.rmse,
            n_points: fit.n_points,
            latency_column: fit.latency_column,
            converged: fit.converged,
            iterations: fit.iterations,
            warnings: fit.warnings.iter().map(ToString::to_string).collect(),
        });
        doc
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != DOCUMENT_VERSION {
            return Err(Error::Version(format!(
                "unsupported document version {} (expected {DOCUMENT_VERSION})",
                self.version
            )));
        }
        let expected = self.model.param_names();
        for name in expected {
            if !self.parameters.contains_key(*name) {
                return Err(Error::Schema(format!(
                    "{} document is missing parameter '{name}'",
                    self.model
                )));
            }
        }
        if let Some(extra) = self.parameters.keys().find(|k| !expected.contains(&k.as_str())) {
            return Err(Error::Schema(format!(
                "{} document has unexpected parameter '{extra}' (expected {})",
                self.model,
                expected.join(", ")
            )));
        }
        match (self.model.needs_routing(), &self.routing) {
            (true, None) => {
                return Err(Error::Schema(format!(
                    "{} document needs a routing section with m and M",
                    self.model
                )))
            }
            (true, Some(r)) => {
                MoeRouting::new(r.active, r.total)?;
            }
            _ => {}
        }
        Ok(())
    }

    fn values<P: ParamSet>(&self, kind: ModelKind) -> Result<P> {
        if self.model != kind {
            return Err(Error::Schema(format!(
                "expected {kind} coefficients, document holds {}",
                self.model
            )));
        }
        let v: Vec<f64> = P::NAMES
            .iter()
            .map(|n| {
                self.parameters.get(*n).copied().ok_or_else(|| {
                    Error::Schema(format!("{kind} document is missing parameter '{n}'"))
                })
            })
            .collect::<Result<_>>()?;
        Ok(P::from_slice(&v))
    }

    pub fn serving(&self) -> Result<ServingCoefficients> {
        self.values(ModelKind::Basic)
    }

    pub fn spec_costs(&self) -> Result<SpecCostCoefficients> {
        self.values(ModelKind::Speculative)
    }

    pub fn moe(&self) -> Result<(MoeCoefficients, MoeRouting)> {
        Ok((self.values(ModelKind::Moe)?, self.routing_or_err()?))
    }

    pub fn moe_spec(&self) -> Result<(MoeSpecCoefficients, MoeRouting)> {
        Ok((self.values(ModelKind::MoeSpeculative)?, self.routing_or_err()?))
    }

    fn routing_or_err(&self) -> Result<MoeRouting> {
        self.routing
            .ok_or_else(|| Error::Schema(format!("{} document has no routing", self.model)))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Schema("coefficient document must be a JSON object".into()))?;
        match obj.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(DOCUMENT_VERSION) => {}
            Some(v) => {
                return Err(Error::Version(format!(
                    "unsupported document version {v} (expected {DOCUMENT_VERSION})"
                )))
            }
            None => return Err(Error::Schema("document has no integer 'version' field".into())),
        }
        match obj.get("model").and_then(serde_json::Value::as_str) {
            Some(m) => {
                m.parse::<ModelKind>()?;
            }
            None => return Err(Error::Schema("document has no 'model' field".into())),
        }
        let doc: CoefficientDocument = serde_json::from_value(value)?;
        doc.validate()?;
        Ok(doc)
    }
}

pub fn write_coefficients(doc: &CoefficientDocument, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, doc.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn read_coefficients(path: impl AsRef<Path>) -> Result<CoefficientDocument> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CoefficientDocument::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_doc() -> CoefficientDocument {
        let costs = SpecCostCoefficients {
            c1p: 0.1,
            c1v: 1.0 / 3.0,
            c1d: 2.0e-17,
            c2p: 0.30000000000000004,
            c2v: 1e-300,
            c2d: 0.0,
        };
        let mut doc = CoefficientDocument::new(ModelKind::Speculative, &costs);
        doc.workload = Some(WorkloadShape {
            prefill_tokens: 128,
            decode_tokens: 256,
        });
        doc.diagnostics = Some(Diagnostics {
            r2: 0.9987654321,
            rmse: 0.0123,
            n_points: 54,
            latency_column: LatencyColumn::P95,
            converged: true,
            iterations: 17,
            warnings: vec!["IdentifiabilityWarning: single k".into()],
        });
        doc.provenance.inputs.push(InputDigest {
            path: "sweep.csv".into(),
            sha256: "ab".repeat(32),
        });
        doc.provenance.seed = Some(7);
        doc
    }

    #[test]
    fn round_trip_is_exact() {
        let doc = spec_doc();
        let back = CoefficientDocument::from_json(&doc.to_json().unwrap()).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.spec_costs().unwrap().c1v, 1.0 / 3.0);

        let moe = CoefficientDocument {
            routing: Some(MoeRouting::new(8, 128).unwrap()),
            ..CoefficientDocument::new(
                ModelKind::Moe,
                &MoeCoefficients {
                    c1u: 1.0,
                    c1s: 0.5,
                    c2u: 0.01,
                    c2s: 0.02,
                },
            )
        };
        let text = moe.to_json().unwrap();
        assert!(text.contains("\"M\": 128"));
        assert_eq!(CoefficientDocument::from_json(&text).unwrap(), moe);
    }

    #[test]
    fn unknown_kind_or_version() {
        let text = spec_doc().to_json().unwrap();
        let bad = text.replace("\"eq3\"", "\"eq9\"");
        assert!(matches!(CoefficientDocument::from_json(&bad), Err(Error::Version(_))));
        let bad = text.replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(CoefficientDocument::from_json(&bad), Err(Error::Version(_))));
    }

    #[test]
    fn missing_parameter_is_schema_error() {
        let mut doc = spec_doc();
        doc.parameters.shift_remove("c2d");
        match CoefficientDocument::from_json(&doc.to_json().unwrap()) {
            Err(Error::Schema(m)) => assert!(m.contains("c2d"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn moe_documents_need_routing() {
        let doc = CoefficientDocument::new(
            ModelKind::Moe,
            &MoeCoefficients {
                c1u: 1.0,
                c1s: 0.5,
                c2u: 0.01,
                c2s: 0.02,
            },
        );
        assert!(matches!(doc.validate(), Err(Error::Schema(_))));
    }

    #[test]
    fn typed_access_checks_kind() {
        let doc = spec_doc();
        assert!(doc.serving().is_err());
        assert!(doc.spec_costs().is_ok());
    }

    #[test]
    fn file_round_trip_and_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        write_coefficients(&spec_doc(), &path).unwrap();
        assert_eq!(read_coefficients(&path).unwrap(), spec_doc());
        let d = InputDigest::of_file(&path).unwrap();
        assert_eq!(d.sha256.len(), 64);
        assert!(matches!(
            read_coefficients(dir.path().join("missing.json")),
            Err(Error::Io { .. })
        ));
    }
}
