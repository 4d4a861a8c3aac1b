//! Data handling, training, evaluation and baselines.
//!
//! Series are kept in "scaled units": raw values divided by one global
//! constant fitted on the training split. Dividing every series by the same
//! number keeps aggregates equal to the sums of their children, so the
//! coherency constraints and the projection hold unchanged in these units.
//! Per-level z-scoring happens only around the forecaster itself.

mod checkpoint;
mod clusters;
mod config;
mod data;
mod metrics;
mod standardize;
mod train;

use thiserror::Error;

use crate::forecaster::ForecastError;
use crate::graph::GraphError;
use crate::hierarchy::HierarchyError;
use crate::ndiff::NdError;
use crate::reconciler::ReconcileError;
use crate::selector::SelectorError;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use clusters::{cluster_profiles, write_profiles_csv, ClusterProfile};
pub use config::{
    CovariateAggregation, DataConfig, EvalConfig, HierarchyConfig, OutputConfig, RunConfig, TrainConfig,
};
pub use data::{
    chrono_split, extract_window, make_windows, synth_generate, usable_window_starts, window_starts, DatasetBundle, DatasetMeta,
    Sample, SynthConfig,
};
pub use metrics::{ari, persistence_baseline, MetricsAccumulator, MetricsReport};
pub use standardize::Standardizer;
pub use train::{evaluate, train, EpochRecord, Split, TrainOutcome, Trainer};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint does not fit the dataset: {0}")]
    Incompatible(String),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: u64,
        reason: String,
        /// State after the last completed epoch with a finite loss.
        checkpoint: Box<Checkpoint>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Reconcile(#[from] ReconcileError),
    #[error(transparent)]
    Nd(#[from] NdError),
}

impl PipelineError {
    /// True for errors caused by NaN or infinite values during training.
    pub fn is_non_finite(&self) -> bool {
        fn nd(e: &NdError) -> bool {
            matches!(e, NdError::NonFinite { .. } | NdError::NonFiniteGradient { .. })
        }
        fn graph(e: &GraphError) -> bool {
            matches!(e, GraphError::Nd(n) if nd(n))
        }
        match self {
            PipelineError::Nd(e) => nd(e),
            PipelineError::Graph(e) => graph(e),
            PipelineError::Forecast(ForecastError::At { source, .. }) => nd(source),
            PipelineError::Forecast(ForecastError::Graph(e)) => graph(e),
            PipelineError::Reconcile(ReconcileError::Nd(e)) => nd(e),
            PipelineError::Selector(SelectorError::Nd(e)) => nd(e),
            _ => false,
        }
    }
}
