//! Graph-based hierarchical time series clustering, forecasting and
//! reconciliation.

pub mod ndiff;
pub mod graph;
pub mod nn;
pub mod hierarchy;
pub mod selector;
pub mod forecaster;
pub mod reconciler;
pub mod pipeline;
