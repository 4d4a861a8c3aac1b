//! Training-split statistics and the transforms built from them.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::config::CovariateAggregation;
use super::data::DatasetBundle;
use super::PipelineError;
use crate::hierarchy::SelectionMatrix;
use crate::ndiff::Tensor;

/// Below this a standard deviation is replaced by 1.
const MIN_STD: f64 = 1e-8;

/// Statistics fitted on the training range only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// Raw values are divided by this to obtain scaled units.
    pub scale: f64,
    /// Per-node mean of observed training values, scaled units.
    pub mean: Vec<f64>,
    /// `N x N` training covariance of the mean-imputed series, scaled units.
    pub cov: Tensor,
    /// Per-column covariate mean and standard deviation.
    pub covariate_mean: Vec<f64>,
    pub covariate_std: Vec<f64>,
}

/// Mean and standard deviation of every node of one level, scaled units.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &DatasetBundle, train: &Range<usize>) -> Result<Self, PipelineError> {
        let n = data.nodes();
        if train.is_empty() || train.end > data.len() {
            return Err(PipelineError::Data("empty or out-of-range training split".into()));
        }
        let mut raw_mean = vec![0.0; n];
        for (i, m) in raw_mean.iter_mut().enumerate() {
            let (mut sum, mut count) = (0.0, 0usize);
            for t in train.clone() {
                if data.observed(t, i) {
                    sum += data.values.get(t, i);
                    count += 1;
                }
            }
            if count == 0 {
                return Err(PipelineError::Data(format!(
                    "node {} has no observed value in the training split",
                    data.node_ids[i]
                )));
            }
            *m = sum / count as f64;
        }
        let filled = |t: usize, i: usize| {
            if data.observed(t, i) {
                data.values.get(t, i)
            } else {
                raw_mean[i]
            }
        };
        let len = train.len() as f64;
        let mut raw_cov = Tensor::zeros(n, n);
        let mut centred = vec![0.0; n];
        for t in train.clone() {
            for (i, c) in centred.iter_mut().enumerate() {
                *c = filled(t, i) - raw_mean[i];
            }
            let data = raw_cov.data_mut();
            for i in 0..n {
                let ci = centred[i];
                if ci == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += ci * centred[j];
                }
            }
        }
        let raw_cov = raw_cov.scale(1.0 / len);
        let mean_std = (0..n).map(|i| raw_cov.get(i, i).max(0.0).sqrt()).sum::<f64>() / n as f64;
        let scale = if mean_std > MIN_STD { mean_std } else { 1.0 };

        let (mut covariate_mean, mut covariate_std) = (Vec::new(), Vec::new());
        if let Some(u) = &data.covariates {
            for c in 0..u.cols() {
                let m = train.clone().map(|t| u.get(t, c)).sum::<f64>() / len;
                let v = train.clone().map(|t| (u.get(t, c) - m).powi(2)).sum::<f64>() / len;
                covariate_mean.push(m);
                covariate_std.push(if v.sqrt() > MIN_STD { v.sqrt() } else { 1.0 });
            }
        }
        Ok(Self {
            scale,
            mean: raw_mean.iter().map(|m| m / scale).collect(),
            cov: raw_cov.scale(1.0 / (scale * scale)),
            covariate_mean,
            covariate_std,
        })
    }

    pub fn nodes(&self) -> usize {
        self.mean.len()
    }

    /// `T x N` series in scaled units with missing entries set to the node mean.
    pub fn scaled_values(&self, data: &DatasetBundle) -> Tensor {
        let (t, n) = data.values.dims();
        let mut out = Tensor::zeros(t, n);
        for r in 0..t {
            for i in 0..n {
                let v = if data.observed(r, i) {
                    data.values.get(r, i) / self.scale
                } else {
                    self.mean[i]
                };
                out.set(r, i, v);
            }
        }
        out
    }

    /// Covariates z-scored per column.
    pub fn standard_covariates(&self, data: &DatasetBundle) -> Option<Tensor> {
        data.covariates.as_ref().map(|u| {
            let mut out = u.clone();
            let cols = u.cols();
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                let c = k % cols;
                *v = (*v - self.covariate_mean[c]) / self.covariate_std[c];
            }
            out
        })
    }

    /// Statistics of every level implied by the bottom statistics: means add
    /// up and covariances aggregate as `Sᵀ Σ S`.
    pub fn level_stats(&self, selections: &[SelectionMatrix]) -> Vec<LevelStats> {
        let mut mean = self.mean.clone();
        let mut cov = self.cov.clone();
        let mut out = vec![stats(&mean, &cov)];
        for s in selections {
            let k = s.clusters();
            let a = s.assignment();
            let mut next_mean = vec![0.0; k];
            for (i, &c) in a.iter().enumerate() {
                next_mean[c] += mean[i];
            }
            let mut next_cov = Tensor::zeros(k, k);
            for (i, &ci) in a.iter().enumerate() {
                for (j, &cj) in a.iter().enumerate() {
                    let v = next_cov.get(ci, cj) + cov.get(i, j);
                    next_cov.set(ci, cj, v);
                }
            }
            mean = next_mean;
            cov = next_cov;
            out.push(stats(&mean, &cov));
        }
        out
    }

    /// Covariates of a level from those of the level below, `rows x (W*d_u)`
    /// per sample, combined through the hard assignment.
    pub fn aggregate_covariates(
        u: &Tensor,
        s: &SelectionMatrix,
        batch: usize,
        how: CovariateAggregation,
    ) -> Tensor {
        let (n, k) = (s.nodes(), s.clusters());
        let cols = u.cols();
        let sizes = s.cluster_sizes();
        let mut out = Tensor::zeros(batch * k, cols);
        for b in 0..batch {
            for (i, &c) in s.assignment().iter().enumerate() {
                let src = u.row_slice(b * n + i);
                let row = b * k + c;
                for (j, &v) in src.iter().enumerate() {
                    let acc = out.get(row, j) + v;
                    out.set(row, j, acc);
                }
            }
            if how == CovariateAggregation::Mean {
                for (c, &size) in sizes.iter().enumerate() {
                    if size > 1 {
                        for j in 0..cols {
                            let v = out.get(b * k + c, j) / size as f64;
                            out.set(b * k + c, j, v);
                        }
                    }
                }
            }
        }
        out
    }
}

fn stats(mean: &[f64], cov: &Tensor) -> LevelStats {
    LevelStats {
        mean: mean.to_vec(),
        std: (0..mean.len())
            .map(|i| {
                let s = cov.get(i, i).max(0.0).sqrt();
                if s > MIN_STD {
                    s
                } else {
                    1.0
                }
            })
            .collect(),
    }
}
