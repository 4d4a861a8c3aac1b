//! Run configuration: one TOML document with a section per component.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::SynthConfig;
use super::PipelineError;
use crate::forecaster::ModelConfig;
use crate::reconciler::LossWeights;
use crate::selector::AnnealConfig;

/// How covariates of child nodes combine into a parent's covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateAggregation {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory; empty when the data comes from elsewhere.
    pub path: String,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub covariate_aggregation: CovariateAggregation,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: String::new(),
            split: [0.7, 0.1, 0.2],
            covariate_aggregation: CovariateAggregation::Sum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchyConfig {
    /// Number of super-nodes at levels `1..=K`; a trailing 1 adds the total.
    /// Empty for a flat model.
    pub cluster_sizes: Vec<usize>,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            cluster_sizes: vec![20, 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub batches_per_epoch: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_epochs: 200,
            batches_per_epoch: 300,
            lr: 0.003,
            lr_decay_factor: 0.25,
            lr_decay_every: 50,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = (epoch / self.lr_decay_every.max(1)) as i32;
        self.lr * self.lr_decay_factor.powi(drops)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// 0-based forecast steps reported individually; empty means all.
    pub horizons: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "runs/latest".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub hierarchy: HierarchyConfig,
    pub selector: AnnealConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Applies `key=value`. The key is a dotted path (`train.lr`) or a bare
    /// field name that occurs in exactly one section. The value is read as a
    /// TOML literal and falls back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<(), PipelineError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("override `{assignment}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        let path = resolve_key(&doc, key)?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let (section, field) = (&path[0], &path[1]);
        doc.get_mut(section)
            .and_then(toml::Value::as_table_mut)
            .expect("resolved section exists")
            .insert(field.clone(), value);
        let text = toml::to_string(&doc).map_err(|e| PipelineError::Config(e.to_string()))?;
        *self = Self::from_toml(&text).map_err(|e| PipelineError::Config(format!("override `{key}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::Config(msg));
        self.model.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let split_sum: f64 = self.data.split.iter().sum();
        if self.data.split.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (split_sum - 1.0).abs() > 1e-9 {
            return bad(format!("data.split {:?} must be fractions summing to 1", self.data.split));
        }
        if let Some(k) = self.hierarchy.cluster_sizes.iter().position(|&s| s == 0) {
            return bad(format!("hierarchy.cluster_sizes[{k}] must be at least 1"));
        }
        let a = &self.selector;
        if !(a.tau0 > 0.0 && a.floor > 0.0 && a.floor <= a.tau0 && a.rate > 0.0 && a.rate <= 1.0) {
            return bad("selector needs tau0 >= floor > 0 and 0 < rate <= 1".into());
        }
        let l = &self.loss;
        if !(l.p == 1 || l.p == 2) {
            return bad(format!("loss.p must be 1 or 2, got {}", l.p));
        }
        if !(l.lambda >= 0.0 && l.mincut_weight >= 0.0) {
            return bad("loss.lambda and loss.mincut_weight must be non-negative".into());
        }
        let t = &self.train;
        if t.batch_size == 0 || t.max_epochs == 0 || t.batches_per_epoch == 0 || t.lr_decay_every == 0 {
            return bad("train sizes and lr_decay_every must be at least 1".into());
        }
        if t.patience == 0 {
            return bad("train.patience must be at least 1".into());
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) || !(t.lr_decay_factor > 0.0 && t.lr_decay_factor <= 1.0) {
            return bad("train.lr must be finite and non-negative, lr_decay_factor in (0, 1]".into());
        }
        if let Some(&h) = self.eval.horizons.iter().find(|&&h| h >= self.model.horizon) {
            return bad(format!("eval.horizons entry {h} is beyond the forecast horizon {}", self.model.horizon));
        }
        Ok(())
    }
}

fn resolve_key(doc: &toml::Table, key: &str) -> Result<[String; 2], PipelineError> {
    if let Some((section, field)) = key.split_once('.') {
        let known = doc
            .get(section)
            .and_then(toml::Value::as_table)
            .is_some_and(|t| t.contains_key(field));
        return if known {
            Ok([section.to_string(), field.to_string()])
        } else {
            Err(PipelineError::Config(format!("unknown config key `{key}`")))
        };
    }
    let hits: Vec<&String> = doc
        .iter()
        .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
        .map(|(s, _)| s)
        .collect();
    match hits.as_slice() {
        [section] => Ok([section.to_string(), key.to_string()]),
        [] => Err(PipelineError::Config(format!("unknown config key `{key}`"))),
        many => Err(PipelineError::Config(format!(
            "`{key}` is ambiguous, use one of {}",
            many.iter().map(|s| format!("{s}.{key}")).collect::<Vec<_>>().join(", ")
        ))),
    }
}
