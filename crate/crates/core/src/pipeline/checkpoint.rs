//! Serialized training state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::DatasetBundle;
use super::standardize::Standardizer;
use super::PipelineError;
use crate::forecaster::Model;
use crate::ndiff::Adam;
use crate::selector::SelectorState;

pub const CHECKPOINT_FORMAT: &str = "hiergraph-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to evaluate or resume a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub model: Model,
    pub selector: SelectorState,
    pub adam_model: Adam,
    pub adam_selector: Adam,
    pub standardizer: Standardizer,
    /// Epochs completed.
    pub epoch: usize,
    /// Epoch (0-based) whose parameters are stored, if any was validated.
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    /// Dataset directory the run was trained on; empty for in-memory data.
    pub dataset: String,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Data(format!("checkpoint {}: {e}", path.display())))?;
        let header: serde_json::Value = serde_json::from_str(&text)?;
        let format = header.get("format").and_then(|v| v.as_str());
        let version = header.get("version").and_then(|v| v.as_u64());
        if format != Some(CHECKPOINT_FORMAT) {
            return Err(PipelineError::Data(format!("{} is not a checkpoint", path.display())));
        }
        if version != Some(u64::from(CHECKPOINT_VERSION)) {
            return Err(PipelineError::Data(format!(
                "checkpoint version {version:?} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        Ok(serde_json::from_value(header)?)
    }

    /// Node count and covariate width must match the dataset.
    pub fn check_compatible(&self, data: &DatasetBundle) -> Result<(), PipelineError> {
        if data.nodes() != self.model.nodes {
            return Err(PipelineError::Incompatible(format!(
                "model has {} nodes, dataset has {}",
                self.model.nodes,
                data.nodes()
            )));
        }
        if data.covariate_dim() != self.model.covariates {
            return Err(PipelineError::Incompatible(format!(
                "model expects {} covariates per node, dataset has {}",
                self.model.covariates,
                data.covariate_dim()
            )));
        }
        if data.covariates.as_ref().map_or(0, |c| c.cols()) != self.standardizer.covariate_mean.len() {
            return Err(PipelineError::Incompatible("covariate columns differ".into()));
        }
        Ok(())
    }
}
