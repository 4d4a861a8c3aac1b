//! Per-cluster summary series for inspecting learned groupings.

use std::path::Path;

use super::data::format_float;
use super::PipelineError;
use crate::hierarchy::{aggregate_series, Hierarchy};
use crate::ndiff::Tensor;

/// Summary of the bottom series grouped under one super-node.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterProfile {
    pub level: usize,
    pub cluster: usize,
    /// Bottom nodes in the cluster.
    pub members: Vec<usize>,
    /// The aggregate series itself.
    pub sum: Vec<f64>,
    pub median: Vec<f64>,
    pub q10: Vec<f64>,
    pub q90: Vec<f64>,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Profiles for every cluster of levels `1..=K` from `T x N` values.
pub fn cluster_profiles(values: &Tensor, hierarchy: &Hierarchy) -> Result<Vec<ClusterProfile>, PipelineError> {
    let t = values.rows();
    let stack = aggregate_series(&values.transpose(), hierarchy)?;
    let mut out = Vec::new();
    for (k, &size) in hierarchy.level_sizes().iter().enumerate().skip(1) {
        let map = hierarchy.bottom_to_level(k);
        let sums = stack.level(k);
        for c in 0..size {
            let members: Vec<usize> = (0..map.len()).filter(|&i| map[i] == c).collect();
            let (mut median, mut q10, mut q90) = (vec![0.0; t], vec![0.0; t], vec![0.0; t]);
            let mut buf = Vec::with_capacity(members.len());
            for s in 0..t {
                buf.clear();
                buf.extend(members.iter().map(|&i| values.get(s, i)));
                buf.sort_by(f64::total_cmp);
                median[s] = quantile(&buf, 0.5);
                q10[s] = quantile(&buf, 0.1);
                q90[s] = quantile(&buf, 0.9);
            }
            out.push(ClusterProfile {
                level: k,
                cluster: c,
                members,
                sum: sums.row_slice(c).to_vec(),
                median,
                q10,
                q90,
            });
        }
    }
    Ok(out)
}

/// One row per time step; four columns per cluster named
/// `L{level}C{cluster}_{sum,median,q10,q90}`. Empty clusters leave blanks.
pub fn write_profiles_csv(path: &Path, profiles: &[ClusterProfile]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    for p in profiles {
        for stat in ["sum", "median", "q10", "q90"] {
            header.push(format!("L{}C{}_{stat}", p.level, p.cluster));
        }
    }
    w.write_record(&header)?;
    let t = profiles.first().map_or(0, |p| p.sum.len());
    let cell = |v: f64| if v.is_nan() { String::new() } else { format_float(v) };
    for s in 0..t {
        let mut row = vec![s.to_string()];
        for p in profiles {
            for v in [p.sum[s], p.median[s], p.q10[s], p.q90[s]] {
                row.push(cell(v));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
