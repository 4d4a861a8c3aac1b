//! Datasets, chronological splits, windows and the synthetic generator.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::graph::{Edge, Graph};
use crate::ndiff::Tensor;

/// Optional dataset metadata (`meta.toml`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<String>,
    /// Train/validation/test ratios overriding the run config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<[f64; 3]>,
}

/// Observations of `N` series over `T` steps with graph side information.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub node_ids: Vec<String>,
    /// `T x N`; missing entries hold 0 and are flagged in `mask`.
    pub values: Tensor,
    /// `T x (N * d_u)`, node-major: node `i` owns columns `i*d_u .. (i+1)*d_u`.
    pub covariates: Option<Tensor>,
    pub graph: Graph,
    /// `T x N` row-major, true where observed.
    pub mask: Vec<bool>,
    pub true_clusters: Option<Vec<usize>>,
    pub meta: DatasetMeta,
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nodes(&self) -> usize {
        self.values.cols()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariates.as_ref().map_or(0, |c| c.cols() / self.nodes().max(1))
    }

    pub fn observed(&self, t: usize, i: usize) -> bool {
        self.mask[t * self.nodes() + i]
    }

    pub fn observed_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    fn check(&self) -> Result<(), PipelineError> {
        let (t, n) = self.values.dims();
        if self.mask.len() != t * n {
            return Err(PipelineError::Data("mask does not match values".into()));
        }
        if self.graph.n != n {
            return Err(PipelineError::Data(format!(
                "graph has {} nodes, values have {n} columns",
                self.graph.n
            )));
        }
        if let Some(c) = &self.covariates {
            if c.rows() != t || n == 0 || c.cols() % n != 0 {
                return Err(PipelineError::Data(format!(
                    "covariates shape {:?} incompatible with {t} steps and {n} nodes",
                    c.shape()
                )));
            }
        }
        if let Some(labels) = &self.true_clusters {
            if labels.len() != n {
                return Err(PipelineError::Data("cluster labels do not match node count".into()));
            }
        }
        Ok(())
    }

    /// Reads `values.csv`, `edges.csv` and the optional `covariates.csv`,
    /// `clusters.csv` and `meta.toml` from `dir`.
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        if !dir.is_dir() {
            return Err(PipelineError::Data(format!("dataset directory {} not found", dir.display())));
        }
        let (node_ids, rows) = read_matrix(&dir.join("values.csv"))?;
        let n = node_ids.len();
        let t = rows.len();
        let mut values = Vec::with_capacity(t * n);
        let mut mask = Vec::with_capacity(t * n);
        for row in rows {
            for v in row {
                match v {
                    Some(x) => {
                        values.push(x);
                        mask.push(true);
                    }
                    None => {
                        values.push(0.0);
                        mask.push(false);
                    }
                }
            }
        }
        let covariates = {
            let path = dir.join("covariates.csv");
            if path.exists() {
                let (_, rows) = read_matrix(&path)?;
                let cols = rows.first().map_or(0, Vec::len);
                let mut data = Vec::with_capacity(rows.len() * cols);
                for (r, row) in rows.into_iter().enumerate() {
                    for v in row {
                        data.push(v.ok_or_else(|| {
                            PipelineError::Data(format!("covariates.csv row {}: missing value", r + 2))
                        })?);
                    }
                }
                Some(Tensor::from_rows(data.len() / cols.max(1), cols, data))
            } else {
                None
            }
        };
        let edges_text = fs::read_to_string(dir.join("edges.csv"))
            .map_err(|e| PipelineError::Data(format!("edges.csv: {e}")))?;
        let graph = Graph::parse_edge_list(n, &edges_text)
            .map_err(|e| PipelineError::Data(format!("edges.csv: {e}")))?;
        let true_clusters = {
            let path = dir.join("clusters.csv");
            if path.exists() {
                Some(read_clusters(&path, n)?)
            } else {
                None
            }
        };
        let meta = {
            let path = dir.join("meta.toml");
            if path.exists() {
                let text = fs::read_to_string(&path)
                    .map_err(|e| PipelineError::Data(format!("meta.toml: {e}")))?;
                toml::from_str(&text).map_err(|e| PipelineError::Data(format!("meta.toml: {e}")))?
            } else {
                DatasetMeta::default()
            }
        };
        let bundle = Self {
            node_ids,
            values: Tensor::from_rows(t, n, values),
            covariates,
            graph,
            mask,
            true_clusters,
            meta,
        };
        bundle.check()?;
        Ok(bundle)
    }

    /// Writes the directory layout read by [`DatasetBundle::load`].
    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        self.check()?;
        fs::create_dir_all(dir)?;
        let (t, n) = self.values.dims();
        let mut w = csv::Writer::from_path(dir.join("values.csv"))?;
        w.write_record(&self.node_ids)?;
        for r in 0..t {
            let row: Vec<String> = (0..n)
                .map(|i| {
                    if self.observed(r, i) {
                        format_float(self.values.get(r, i))
                    } else {
                        String::new()
                    }
                })
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        if let Some(c) = &self.covariates {
            let du = self.covariate_dim();
            let mut w = csv::Writer::from_path(dir.join("covariates.csv"))?;
            let header: Vec<String> = (0..n)
                .flat_map(|i| (0..du).map(move |f| format!("{}:{f}", i)))
                .collect();
            w.write_record(&header)?;
            for r in 0..c.rows() {
                w.write_record(c.row_slice(r).iter().map(|&v| format_float(v)))?;
            }
            w.flush()?;
        }
        fs::write(dir.join("edges.csv"), format!("src,dst,weight\n{}", self.graph.to_edge_list()))?;
        if let Some(labels) = &self.true_clusters {
            let mut w = csv::Writer::from_path(dir.join("clusters.csv"))?;
            w.write_record(["node", "label"])?;
            for (i, l) in labels.iter().enumerate() {
                w.write_record([i.to_string(), l.to_string()])?;
            }
            w.flush()?;
        }
        let meta = toml::to_string(&self.meta).map_err(|e| PipelineError::Data(e.to_string()))?;
        fs::write(dir.join("meta.toml"), meta)?;
        Ok(())
    }
}

/// Shortest representation that parses back to the same value.
pub(crate) fn format_float(v: f64) -> String {
    format!("{v:?}")
}

type Matrix = (Vec<String>, Vec<Vec<Option<f64>>>);

fn read_matrix(path: &Path) -> Result<Matrix, PipelineError> {
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut reader = csv::Reader::from_path(path).map_err(|e| PipelineError::Data(format!("{name}: {e}")))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| PipelineError::Data(format!("{name}: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| PipelineError::Data(format!("{name}: {e}")))?;
        let row = rec
            .iter()
            .map(|field| {
                let f = field.trim();
                if f.is_empty() || f.eq_ignore_ascii_case("nan") {
                    Ok(None)
                } else {
                    f.parse::<f64>().map(Some).map_err(|_| {
                        PipelineError::Data(format!("{name} row {}: cannot parse `{f}`", r + 2))
                    })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

fn read_clusters(path: &Path, n: usize) -> Result<Vec<usize>, PipelineError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| PipelineError::Data(format!("clusters.csv: {e}")))?;
    let mut labels = vec![None; n];
    for rec in reader.records() {
        let rec = rec.map_err(|e| PipelineError::Data(format!("clusters.csv: {e}")))?;
        let parse = |i: usize| {
            rec.get(i)
                .and_then(|s| s.trim().parse::<usize>().ok())
                .ok_or_else(|| PipelineError::Data(format!("clusters.csv: bad record {rec:?}")))
        };
        let (node, label) = (parse(0)?, parse(1)?);
        if node >= n {
            return Err(PipelineError::Data(format!("clusters.csv: node {node} out of range")));
        }
        labels[node] = Some(label);
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| PipelineError::Data(format!("clusters.csv: node {i} has no label"))))
        .collect()
}

/// Contiguous train / validation / test ranges.
///
/// Each split must fit at least one window of `window + horizon` steps.
pub fn chrono_split(
    t: usize,
    ratios: [f64; 3],
    window: usize,
    horizon: usize,
) -> Result<[Range<usize>; 3], PipelineError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (sum - 1.0).abs() > 1e-9 {
        return Err(PipelineError::Config(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let train_end = (ratios[0] * t as f64).round() as usize;
    let val_end = ((ratios[0] + ratios[1]) * t as f64).round() as usize;
    let splits = [0..train_end, train_end..val_end, val_end..t];
    let need = window + horizon;
    for (name, r) in ["train", "validation", "test"].iter().zip(&splits) {
        if r.len() < need {
            return Err(PipelineError::Data(format!(
                "{name} split has {} steps, needs at least {need}",
                r.len()
            )));
        }
    }
    Ok(splits)
}

/// Forecast origins `t` (index of the first target step) for stride-1
/// windows fully inside `range`: inputs `t-W .. t`, targets `t .. t+H`.
pub fn window_starts(range: &Range<usize>, window: usize, horizon: usize) -> Vec<usize> {
    if range.len() < window + horizon {
        return Vec::new();
    }
    (range.start + window..=range.end - horizon).collect()
}

/// [`window_starts`] without windows whose targets are all missing.
pub fn usable_window_starts(
    data: &DatasetBundle,
    range: &Range<usize>,
    window: usize,
    horizon: usize,
) -> Vec<usize> {
    let n = data.nodes();
    window_starts(range, window, horizon)
        .into_iter()
        .filter(|&t| (t..t + horizon).any(|s| (0..n).any(|i| data.observed(s, i))))
        .collect()
}

/// One window: inputs `N x W`, covariates `N x (W * d_u)` step-major,
/// targets `N x H`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: usize,
    pub x: Tensor,
    pub u: Option<Tensor>,
    pub y: Tensor,
}

pub fn extract_window(data: &DatasetBundle, t: usize, window: usize, horizon: usize) -> Sample {
    let n = data.nodes();
    let du = data.covariate_dim();
    let take = |from: usize, len: usize| {
        let mut out = Tensor::zeros(n, len);
        for i in 0..n {
            for s in 0..len {
                out.set(i, s, data.values.get(from + s, i));
            }
        }
        out
    };
    let u = data.covariates.as_ref().map(|c| {
        let mut out = Tensor::zeros(n, window * du);
        for i in 0..n {
            for s in 0..window {
                for f in 0..du {
                    out.set(i, s * du + f, c.get(t - window + s, i * du + f));
                }
            }
        }
        out
    });
    Sample {
        t,
        x: take(t - window, window),
        u,
        y: take(t, horizon),
    }
}

/// All stride-1 windows of `range`.
pub fn make_windows<'a>(
    data: &'a DatasetBundle,
    range: &Range<usize>,
    window: usize,
    horizon: usize,
) -> impl Iterator<Item = Sample> + 'a {
    window_starts(range, window, horizon)
        .into_iter()
        .map(move |t| extract_window(data, t, window, horizon))
}

/// Synthetic clustered collection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_clusters: usize,
    pub nodes_per_cluster: usize,
    pub length: usize,
    pub noise: f64,
    pub seed: u64,
    /// Inter-cluster edges per pair of clusters.
    pub inter_edges: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_clusters: 3,
            nodes_per_cluster: 10,
            length: 2000,
            noise: 0.3,
            seed: 0,
            inter_edges: 2,
        }
    }
}

/// Each cluster follows a latent signal (a sinusoid with its own period and
/// phase plus an AR(1) component); nodes add independent Gaussian noise.
/// Edges connect all pairs inside a cluster with weight 1 and a few random
/// pairs across clusters with weight 0.1. Node-to-cluster assignment is
/// shuffled.
pub fn synth_generate(cfg: &SynthConfig) -> Result<DatasetBundle, PipelineError> {
    if cfg.n_clusters < 2 {
        return Err(PipelineError::Config("synthetic data needs at least 2 clusters".into()));
    }
    if cfg.nodes_per_cluster == 0 || cfg.length == 0 || !(cfg.noise >= 0.0) {
        return Err(PipelineError::Config("synthetic sizes must be positive and noise non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (k, per, t) = (cfg.n_clusters, cfg.nodes_per_cluster, cfg.length);
    let n = k * per;
    let std = Normal::new(0.0, 1.0).expect("valid normal");

    let mut labels: Vec<usize> = (0..n).map(|i| i / per).collect();
    labels.shuffle(&mut rng);

    let mut latent = vec![vec![0.0; t]; k];
    for (c, series) in latent.iter_mut().enumerate() {
        let period = 8.0 + 7.0 * c as f64 + rng.random_range(0.0..3.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amplitude = 1.0 + 0.5 * c as f64;
        let level = 4.0 + 2.0 * c as f64;
        let ar = 0.8 - 0.15 * (c % 3) as f64;
        let mut z = 0.0;
        for (s, v) in series.iter_mut().enumerate() {
            z = ar * z + 0.3 * std.sample(&mut rng);
            *v = level + amplitude * (std::f64::consts::TAU * s as f64 / period + phase).sin() + z;
        }
    }
    let mut values = Tensor::zeros(t, n);
    for s in 0..t {
        for i in 0..n {
            values.set(s, i, latent[labels[i]][s] + cfg.noise * std.sample(&mut rng));
        }
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let mut edges = Vec::new();
    for group in &members {
        for (a, &i) in group.iter().enumerate() {
            for &j in &group[a + 1..] {
                edges.push(Edge { src: i, dst: j, weight: 1.0 });
            }
        }
    }
    for c1 in 0..k {
        for c2 in c1 + 1..k {
            let mut used = std::collections::BTreeSet::new();
            while used.len() < cfg.inter_edges.min(per * per) {
                let i = members[c1][rng.random_range(0..per)];
                let j = members[c2][rng.random_range(0..per)];
                if used.insert((i, j)) {
                    edges.push(Edge { src: i, dst: j, weight: 0.1 });
                }
            }
        }
    }
    // Stored directed so the edge list round-trips through the file format.
    let mut directed = Vec::with_capacity(edges.len() * 2);
    for e in edges {
        directed.push(Edge { src: e.dst, dst: e.src, weight: e.weight });
        directed.push(e);
    }
    directed.sort_by_key(|e| (e.src, e.dst));
    let graph = Graph::new(n, directed, true)?;

    Ok(DatasetBundle {
        node_ids: (0..n).map(|i| format!("n{i}")).collect(),
        values,
        covariates: None,
        graph,
        mask: vec![true; t * n],
        true_clusters: Some(labels),
        meta: DatasetMeta::default(),
    })
}
