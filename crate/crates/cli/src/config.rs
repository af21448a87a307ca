use std::path::{Path, PathBuf};

use ctlrp::evalharness::EvalConfig;
use ctlrp::explain::Method;
use ctlrp::graphdata::SyntheticConfig;
use ctlrp::model::{ModelConfig, TrainConfig};
use ctlrp::textembed::BackwardMode;
use ctlrp::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSettings {
    pub method: Method,
    pub epsilon: f64,
    pub backward_mode: BackwardMode,
    pub threshold: f64,
    pub html: bool,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        Self {
            method: Method::CtLrp,
            epsilon: 1e-6,
            backward_mode: BackwardMode::Conserving,
            threshold: ctlrp::explain::DEFAULT_THRESHOLD,
            html: false,
        }
    }
}

/// Everything a run can be configured with. Loaded from an optional JSON
/// file; command-line flags are applied on top.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub explain: ExplainSettings,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn jobs(&self) -> usize {
        self.jobs.unwrap_or(1)
    }
}
