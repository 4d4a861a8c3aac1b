//! Forecast metrics, the adjusted Rand index and the persistence baseline.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::data::{usable_window_starts, DatasetBundle};
use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean absolute error over observed bottom-level entries.
    pub mae: f64,
    /// `100 * Σ|ŷ - y| / Σ|y|` over the same entries.
    pub mre: f64,
    /// MAE of individual 0-based forecast steps.
    pub mae_at: BTreeMap<usize, f64>,
    /// MAE of every level of the stack, bottom first.
    pub per_level_mae: Vec<f64>,
    /// Largest per-sample `‖QȲ‖₂` of the evaluated forecasts.
    pub coherency_residual: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
    pub samples: usize,
}

/// Running sums behind a [`MetricsReport`].
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    horizon: usize,
    abs_err: f64,
    abs_target: f64,
    count: usize,
    step_err: Vec<f64>,
    step_count: Vec<usize>,
    level_err: Vec<f64>,
    level_count: Vec<usize>,
    residual: f64,
    samples: usize,
}

impl MetricsAccumulator {
    pub fn new(horizon: usize, levels: usize) -> Self {
        Self {
            horizon,
            abs_err: 0.0,
            abs_target: 0.0,
            count: 0,
            step_err: vec![0.0; horizon],
            step_count: vec![0; horizon],
            level_err: vec![0.0; levels],
            level_count: vec![0; levels],
            residual: 0.0,
            samples: 0,
        }
    }

    /// Bottom-level forecasts of one sample, row-major `N x H`.
    pub fn add_bottom(&mut self, pred: &[f64], target: &[f64], mask: &[bool]) {
        self.samples += 1;
        for (k, ((&p, &y), &m)) in pred.iter().zip(target).zip(mask).enumerate() {
            if !m {
                continue;
            }
            let e = (p - y).abs();
            self.abs_err += e;
            self.abs_target += y.abs();
            self.count += 1;
            let h = k % self.horizon;
            self.step_err[h] += e;
            self.step_count[h] += 1;
        }
    }

    /// Forecasts of level `k` for one sample, row-major `N_k x H`.
    pub fn add_level(&mut self, level: usize, pred: &[f64], target: &[f64], mask: &[bool]) {
        for ((&p, &y), &m) in pred.iter().zip(target).zip(mask) {
            if m {
                self.level_err[level] += (p - y).abs();
                self.level_count[level] += 1;
            }
        }
    }

    pub fn add_residual(&mut self, residual: f64) {
        self.residual = self.residual.max(residual);
    }

    /// `horizons` selects the reported steps; empty reports all of them.
    pub fn finish(&self, horizons: &[usize], ari: Option<f64>) -> Result<MetricsReport, PipelineError> {
        let ratio = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
        let steps: Vec<usize> = if horizons.is_empty() {
            (0..self.horizon).collect()
        } else {
            horizons.to_vec()
        };
        let mut mae_at = BTreeMap::new();
        for h in steps {
            if h >= self.horizon {
                return Err(PipelineError::Config(format!(
                    "horizon step {h} is beyond the forecast horizon {}",
                    self.horizon
                )));
            }
            mae_at.insert(h, ratio(self.step_err[h], self.step_count[h]));
        }
        let mre = if self.abs_target > 0.0 {
            100.0 * self.abs_err / self.abs_target
        } else if self.abs_err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        Ok(MetricsReport {
            mae: ratio(self.abs_err, self.count),
            mre,
            mae_at,
            per_level_mae: self
                .level_err
                .iter()
                .zip(&self.level_count)
                .map(|(&e, &n)| ratio(e, n))
                .collect(),
            coherency_residual: self.residual,
            ari,
            samples: self.samples,
        })
    }
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index of two labelings of the same items.
///
/// When both partitions are trivial in the same way (the chance-corrected
/// denominator vanishes) the result is 1.
pub fn ari(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len(), "labelings must have equal length");
    let n = predicted.len();
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        *table.entry((p, t)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(t).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = a * b / total;
    let max = (a + b) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Repeats the last observed input of every window across the horizon.
/// Windows follow the same alignment as the forecaster's samples; a node
/// with no observed input in a window is left out of that window.
pub fn persistence_baseline(
    data: &DatasetBundle,
    range: &Range<usize>,
    window: usize,
    horizon: usize,
    horizons: &[usize],
) -> Result<MetricsReport, PipelineError> {
    let n = data.nodes();
    let starts = usable_window_starts(data, range, window, horizon);
    if starts.is_empty() {
        return Err(PipelineError::Data(format!(
            "range {range:?} holds no window of {} steps",
            window + horizon
        )));
    }
    let mut acc = MetricsAccumulator::new(horizon, 1);
    let mut pred = vec![0.0; n * horizon];
    let mut target = vec![0.0; n * horizon];
    let mut mask = vec![false; n * horizon];
    for t in starts {
        for i in 0..n {
            let last = (t - window..t).rev().find(|&s| data.observed(s, i));
            for h in 0..horizon {
                let k = i * horizon + h;
                target[k] = data.values.get(t + h, i);
                pred[k] = last.map_or(0.0, |s| data.values.get(s, i));
                mask[k] = last.is_some() && data.observed(t + h, i);
            }
        }
        acc.add_bottom(&pred, &target, &mask);
        acc.add_level(0, &pred, &target, &mask);
    }
    acc.finish(horizons, None)
}
