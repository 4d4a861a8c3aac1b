//! Select / reduce / lift / connect operators and the coherency algebra.
//!
//! Level 0 holds the `N` bottom series. Selection `S^(k)` maps the
//! `N_{k-1}` nodes of level `k-1` onto the `N_k` super-nodes of level `k`.
//! Stacked collections list levels top first: `[Y^(K); ...; Y^(1); Y^(0)]`,
//! so the aggregation matrix `C` has `M - N` rows and `Q = [I | -C]`.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndiff::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum HierarchyError {
    #[error("row {row} of the selection matrix is not one-hot")]
    NotOneHot { row: usize },
    #[error("node {node} assigned to cluster {cluster}, but level has {clusters} clusters")]
    ClusterOutOfRange {
        node: usize,
        cluster: usize,
        clusters: usize,
    },
    #[error("{op}: expected {expected} rows, got {actual}")]
    Shape {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("level {level} expects {expected} input nodes, previous level has {actual}")]
    LevelMismatch {
        level: usize,
        expected: usize,
        actual: usize,
    },
    #[error("aggregation matrix needs at least one selection")]
    NoSelections,
    #[error("selection text line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Hard partition of one level's nodes into super-nodes.
///
/// Stored as an assignment vector, so every row of the dense matrix is
/// one-hot by construction. Empty clusters are allowed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMatrix {
    assignment: Vec<usize>,
    clusters: usize,
}

impl SelectionMatrix {
    pub fn new(assignment: Vec<usize>, clusters: usize) -> Result<Self, HierarchyError> {
        if let Some((node, &cluster)) = assignment.iter().enumerate().find(|(_, &c)| c >= clusters) {
            return Err(HierarchyError::ClusterOutOfRange {
                node,
                cluster,
                clusters,
            });
        }
        Ok(Self {
            assignment,
            clusters,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            assignment: (0..n).collect(),
            clusters: n,
        }
    }

    /// Every node in one super-node.
    pub fn total(n: usize) -> Self {
        Self {
            assignment: vec![0; n],
            clusters: 1,
        }
    }

    pub fn from_dense(s: &Tensor) -> Result<Self, HierarchyError> {
        let (rows, cols) = s.dims();
        let mut assignment = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = s.row_slice(r);
            let ones: Vec<usize> = (0..cols).filter(|&c| row[c] == 1.0).collect();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones.len() != 1 || zeros != cols - 1 {
                return Err(HierarchyError::NotOneHot { row: r });
            }
            assignment.push(ones[0]);
        }
        Ok(Self {
            assignment,
            clusters: cols,
        })
    }

    pub fn to_dense(&self) -> Tensor {
        let mut s = Tensor::zeros(self.assignment.len(), self.clusters);
        for (i, &c) in self.assignment.iter().enumerate() {
            s.set(i, c, 1.0);
        }
        s
    }

    /// Number of input nodes (rows).
    pub fn nodes(&self) -> usize {
        self.assignment.len()
    }

    /// Number of super-nodes (columns).
    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.clusters];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn empty_clusters(&self) -> usize {
        self.cluster_sizes().iter().filter(|&&s| s == 0).count()
    }
}

/// `S^T H`: sums the rows of each cluster.
pub fn reduce(h: &Tensor, s: &SelectionMatrix) -> Result<Tensor, HierarchyError> {
    let (rows, cols) = h.dims();
    if rows != s.nodes() {
        return Err(HierarchyError::Shape {
            op: "reduce",
            expected: s.nodes(),
            actual: rows,
        });
    }
    let mut out = Tensor::zeros(s.clusters(), cols);
    for (i, &c) in s.assignment().iter().enumerate() {
        for (o, v) in out.data_mut()[c * cols..(c + 1) * cols]
            .iter_mut()
            .zip(h.row_slice(i))
        {
            *o += v;
        }
    }
    Ok(out)
}

/// `S H`: copies each super-node's row back to its members.
pub fn lift(h: &Tensor, s: &SelectionMatrix) -> Result<Tensor, HierarchyError> {
    let (rows, cols) = h.dims();
    if rows != s.clusters() {
        return Err(HierarchyError::Shape {
            op: "lift",
            expected: s.clusters(),
            actual: rows,
        });
    }
    let mut out = Vec::with_capacity(s.nodes() * cols);
    for &c in s.assignment() {
        out.extend_from_slice(h.row_slice(c));
    }
    Ok(Tensor::from_rows(s.nodes(), cols, out))
}

/// `S^T A S`: super-node edge weights are sums over member pairs.
pub fn connect(s: &SelectionMatrix, a: &Tensor) -> Result<Tensor, HierarchyError> {
    let (rows, cols) = a.dims();
    if rows != s.nodes() || cols != s.nodes() {
        return Err(HierarchyError::Shape {
            op: "connect",
            expected: s.nodes(),
            actual: rows.max(cols),
        });
    }
    let k = s.clusters();
    let asg = s.assignment();
    let mut out = Tensor::zeros(k, k);
    for i in 0..rows {
        for j in 0..cols {
            let w = a.get(i, j);
            if w != 0.0 {
                let (p, q) = (asg[i], asg[j]);
                out.set(p, q, out.get(p, q) + w);
            }
        }
    }
    Ok(out)
}

/// Checks that consecutive selections chain, returning `[N_0, ..., N_K]`.
fn level_sizes(selections: &[SelectionMatrix]) -> Result<Vec<usize>, HierarchyError> {
    let mut sizes = Vec::with_capacity(selections.len() + 1);
    if let Some(first) = selections.first() {
        sizes.push(first.nodes());
    }
    for (k, s) in selections.iter().enumerate() {
        let prev = *sizes.last().unwrap();
        if s.nodes() != prev {
            return Err(HierarchyError::LevelMismatch {
                level: k + 1,
                expected: s.nodes(),
                actual: prev,
            });
        }
        sizes.push(s.clusters());
    }
    Ok(sizes)
}

/// Bottom-to-aggregate map `C`, top level first.
///
/// Row block for level `k` is `(S^(1) ... S^(k))^T`.
pub fn build_c(selections: &[SelectionMatrix]) -> Result<Tensor, HierarchyError> {
    if selections.is_empty() {
        return Err(HierarchyError::NoSelections);
    }
    let sizes = level_sizes(selections)?;
    let n = sizes[0];
    // Bottom node -> node index at each level.
    let mut maps: Vec<Vec<usize>> = Vec::with_capacity(selections.len());
    let mut current: Vec<usize> = (0..n).collect();
    for s in selections {
        current = current.iter().map(|&i| s.assignment()[i]).collect();
        maps.push(current.clone());
    }
    let aggregates: usize = sizes[1..].iter().sum();
    let mut c = Tensor::zeros(aggregates, n);
    let mut offset = 0;
    for k in (0..selections.len()).rev() {
        for (bottom, &node) in maps[k].iter().enumerate() {
            c.set(offset + node, bottom, 1.0);
        }
        offset += sizes[k + 1];
    }
    Ok(c)
}

/// `Q = [I | -C]`.
pub fn build_q(c: &Tensor) -> Tensor {
    let (a, n) = c.dims();
    let mut q = Tensor::zeros(a, a + n);
    for i in 0..a {
        q.set(i, i, 1.0);
        for j in 0..n {
            q.set(i, a + j, -c.get(i, j));
        }
    }
    q
}

/// Row ranges of each level, indexed by level, when stacked top first.
pub fn level_offsets(sizes: &[usize]) -> Vec<Range<usize>> {
    let mut offsets = vec![0..0; sizes.len()];
    let mut row = 0;
    for (k, &n) in sizes.iter().enumerate().rev() {
        offsets[k] = row..row + n;
        row += n;
    }
    offsets
}

/// Values of every level stacked top first.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelStack {
    pub values: Tensor,
    /// Row range of level `k` in `values`, indexed by `k`.
    pub level_offsets: Vec<Range<usize>>,
}

impl LevelStack {
    /// Stacks per-level blocks given bottom first (`blocks[k]` is level `k`).
    pub fn from_levels(blocks: &[Tensor]) -> Self {
        let cols = blocks.first().map_or(0, Tensor::cols);
        let total: usize = blocks.iter().map(Tensor::rows).sum();
        let mut data = Vec::with_capacity(total * cols);
        for b in blocks.iter().rev() {
            data.extend_from_slice(b.data());
        }
        let sizes: Vec<usize> = blocks.iter().map(Tensor::rows).collect();
        let offsets = level_offsets(&sizes);
        Self {
            values: Tensor::from_rows(total, cols, data),
            level_offsets: offsets,
        }
    }

    pub fn levels(&self) -> usize {
        self.level_offsets.len()
    }

    pub fn level(&self, k: usize) -> Tensor {
        let r = &self.level_offsets[k];
        let cols = self.values.cols();
        Tensor::from_rows(
            r.len(),
            cols,
            self.values.data()[r.start * cols..r.end * cols].to_vec(),
        )
    }

    pub fn bottom(&self) -> Tensor {
        self.level(0)
    }
}

/// A validated chain of selections together with every level's adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    selections: Vec<SelectionMatrix>,
    level_sizes: Vec<usize>,
    adjacencies: Vec<Tensor>,
}

impl Hierarchy {
    pub fn new(
        base_adjacency: Tensor,
        selections: Vec<SelectionMatrix>,
    ) -> Result<Self, HierarchyError> {
        let n = base_adjacency.rows();
        let mut sizes = level_sizes(&selections)?;
        if sizes.is_empty() {
            sizes.push(n);
        }
        if sizes[0] != n {
            return Err(HierarchyError::LevelMismatch {
                level: 1,
                expected: sizes[0],
                actual: n,
            });
        }
        let mut adjacencies = vec![base_adjacency];
        for s in &selections {
            let next = connect(s, adjacencies.last().unwrap())?;
            adjacencies.push(next);
        }
        Ok(Self {
            selections,
            level_sizes: sizes,
            adjacencies,
        })
    }

    pub fn flat(base_adjacency: Tensor) -> Self {
        Self::new(base_adjacency, Vec::new()).expect("flat hierarchy is always valid")
    }

    /// Number of aggregation rounds `K`.
    pub fn depth(&self) -> usize {
        self.selections.len()
    }

    pub fn selections(&self) -> &[SelectionMatrix] {
        &self.selections
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    pub fn adjacency(&self, level: usize) -> &Tensor {
        &self.adjacencies[level]
    }

    pub fn bottom_size(&self) -> usize {
        self.level_sizes[0]
    }

    /// Total number of series `M` across levels.
    pub fn total_size(&self) -> usize {
        self.level_sizes.iter().sum()
    }

    /// Number of currently empty clusters across all levels.
    pub fn empty_cluster_count(&self) -> usize {
        self.selections.iter().map(SelectionMatrix::empty_clusters).sum()
    }

    /// `C`; a `0 x N` matrix when there are no aggregates.
    pub fn aggregation_matrix(&self) -> Tensor {
        if self.selections.is_empty() {
            Tensor::zeros(0, self.bottom_size())
        } else {
            build_c(&self.selections).expect("validated on construction")
        }
    }

    pub fn constraint_matrix(&self) -> Tensor {
        build_q(&self.aggregation_matrix())
    }

    /// Node index at level `k` of every bottom node.
    pub fn bottom_to_level(&self, level: usize) -> Vec<usize> {
        let mut map: Vec<usize> = (0..self.bottom_size()).collect();
        for s in &self.selections[..level] {
            map = map.iter().map(|&i| s.assignment()[i]).collect();
        }
        map
    }
}

/// `Y = [C; I] X` computed level by level with [`reduce`].
pub fn aggregate_series(x: &Tensor, hierarchy: &Hierarchy) -> Result<LevelStack, HierarchyError> {
    if x.rows() != hierarchy.bottom_size() {
        return Err(HierarchyError::Shape {
            op: "aggregate_series",
            expected: hierarchy.bottom_size(),
            actual: x.rows(),
        });
    }
    let mut blocks = vec![x.clone()];
    for s in hierarchy.selections() {
        let next = reduce(blocks.last().unwrap(), s)?;
        blocks.push(next);
    }
    Ok(LevelStack::from_levels(&blocks))
}

/// One line per level, bottom-up: `node:cluster` pairs separated by spaces.
pub fn selections_to_text(selections: &[SelectionMatrix]) -> String {
    let mut out = String::new();
    for s in selections {
        let line: Vec<String> = s
            .assignment()
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{i}:{c}"))
            .collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// Parses [`selections_to_text`] output. A level's cluster count is the
/// larger of its highest cluster index + 1 and the node count of the next
/// line, so empty clusters survive whenever a higher level references them.
pub fn parse_selections(text: &str) -> Result<Vec<SelectionMatrix>, HierarchyError> {
    let mut levels: Vec<Vec<usize>> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut pairs = Vec::new();
        for token in line.split_whitespace() {
            let (node, cluster) = token
                .split_once(':')
                .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
                .ok_or_else(|| HierarchyError::Parse {
                    line: lineno + 1,
                    msg: format!("bad pair `{token}`"),
                })?;
            pairs.push((node, cluster));
        }
        pairs.sort_unstable();
        for (expected, &(node, _)) in pairs.iter().enumerate() {
            if node != expected {
                return Err(HierarchyError::Parse {
                    line: lineno + 1,
                    msg: format!("node indices must cover 0..{} exactly once", pairs.len()),
                });
            }
        }
        levels.push(pairs.into_iter().map(|(_, c)| c).collect());
    }
    let mut out = Vec::with_capacity(levels.len());
    for (k, assignment) in levels.iter().enumerate() {
        let max_used = assignment.iter().max().map_or(0, |m| m + 1);
        let next_nodes = levels.get(k + 1).map_or(0, Vec::len);
        out.push(SelectionMatrix::new(
            assignment.clone(),
            max_used.max(next_nodes),
        )?);
    }
    level_sizes(&out)?;
    Ok(out)
}
