//! Weighted graphs, adjacency normalisation and intra-level message passing.
//!
//! Dense adjacency convention: `A[i][j]` is the weight of the edge `i -> j`.
//! A node's in-neighbours `j` are those with `A[j][i] > 0`; the weight of
//! that edge is written `a_ji`.
//!
//! Message-passing layers operate on batched feature matrices of shape
//! `(B * N) x d`, where rows `b*N .. (b+1)*N` hold the node features of
//! sample `b`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndiff::{Bound, NdError, ParamStore, Tensor, Var};
use crate::nn::{Activation, Linear};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("edge ({src}, {dst}) references a node outside 0..{n}")]
    NodeOutOfRange { src: usize, dst: usize, n: usize },
    #[error("edge ({src}, {dst}) has invalid weight {weight}")]
    BadWeight { src: usize, dst: usize, weight: f64 },
    #[error("duplicate edge ({src}, {dst})")]
    DuplicateEdge { src: usize, dst: usize },
    #[error("adjacency must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("adjacency entry ({row}, {col}) is negative: {value}")]
    NegativeWeight { row: usize, col: usize, value: f64 },
    #[error("edge list line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("diffusion order must be at least 1")]
    BadOrder,
    #[error("feature matrix has {rows} rows, not a multiple of {nodes} nodes")]
    BatchShape { rows: usize, nodes: usize },
    #[error(transparent)]
    Nd(#[from] NdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub n: usize,
    pub edges: Vec<Edge>,
    /// When false every edge also acts in the reverse direction.
    pub directed: bool,
}

impl Graph {
    pub fn new(n: usize, edges: Vec<Edge>, directed: bool) -> Result<Self, GraphError> {
        let mut seen = HashSet::new();
        for e in &edges {
            if e.src >= n || e.dst >= n {
                return Err(GraphError::NodeOutOfRange {
                    src: e.src,
                    dst: e.dst,
                    n,
                });
            }
            if !(e.weight >= 0.0 && e.weight.is_finite()) {
                return Err(GraphError::BadWeight {
                    src: e.src,
                    dst: e.dst,
                    weight: e.weight,
                });
            }
            let key = if directed {
                (e.src, e.dst)
            } else {
                (e.src.min(e.dst), e.src.max(e.dst))
            };
            if !seen.insert(key) {
                return Err(GraphError::DuplicateEdge {
                    src: e.src,
                    dst: e.dst,
                });
            }
        }
        Ok(Self { n, edges, directed })
    }

    /// Dense `n x n` adjacency.
    pub fn adjacency(&self) -> Tensor {
        let mut a = Tensor::zeros(self.n, self.n);
        for e in &self.edges {
            a.set(e.src, e.dst, e.weight);
            if !self.directed {
                a.set(e.dst, e.src, e.weight);
            }
        }
        a
    }

    /// Parses `src,dst,weight` lines. Blank lines, `#` comments and a
    /// non-numeric header line are skipped. Each line is one directed edge.
    pub fn parse_edge_list(n: usize, text: &str) -> Result<Self, GraphError> {
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(GraphError::Parse {
                    line: lineno + 1,
                    msg: format!("expected 3 fields, found {}", fields.len()),
                });
            }
            let parsed = (
                fields[0].parse::<usize>(),
                fields[1].parse::<usize>(),
                fields[2].parse::<f64>(),
            );
            match parsed {
                (Ok(src), Ok(dst), Ok(weight)) => edges.push(Edge { src, dst, weight }),
                _ if lineno == 0 => continue,
                _ => {
                    return Err(GraphError::Parse {
                        line: lineno + 1,
                        msg: format!("cannot parse `{line}`"),
                    })
                }
            }
        }
        Self::new(n, edges, true)
    }

    /// Writes one directed `src,dst,weight` line per adjacency entry.
    pub fn to_edge_list(&self) -> String {
        let a = self.adjacency();
        let mut out = String::new();
        for i in 0..self.n {
            for j in 0..self.n {
                let w = a.get(i, j);
                if w != 0.0 {
                    let _ = writeln!(out, "{i},{j},{w}");
                }
            }
        }
        out
    }
}

fn check_square_nonneg(a: &Tensor) -> Result<usize, GraphError> {
    let (rows, cols) = a.dims();
    if rows != cols {
        return Err(GraphError::NotSquare { rows, cols });
    }
    for i in 0..rows {
        for j in 0..cols {
            let value = a.get(i, j);
            if value < 0.0 {
                return Err(GraphError::NegativeWeight {
                    row: i,
                    col: j,
                    value,
                });
            }
        }
    }
    Ok(rows)
}

/// `D^{-1/2} A D^{-1/2}` with `D` the row sums of `A`; zero-degree rows and
/// columns stay zero.
pub fn normalize_sym(a: &Tensor) -> Result<Tensor, GraphError> {
    let n = check_square_nonneg(a)?;
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = a.row_slice(i).iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, (inv_sqrt[i] * inv_sqrt[j]) * a.get(i, j));
        }
    }
    Ok(out)
}

/// `D^{-1} A`; zero rows stay zero.
pub fn normalize_rows(a: &Tensor) -> Result<Tensor, GraphError> {
    let n = check_square_nonneg(a)?;
    let mut out = a.clone();
    for i in 0..n {
        let d: f64 = a.row_slice(i).iter().sum();
        let inv = if d > 0.0 { 1.0 / d } else { 0.0 };
        for j in 0..n {
            out.set(i, j, a.get(i, j) * inv);
        }
    }
    Ok(out)
}

/// Which intra-level propagation rule a layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Gconv,
    Diffusion,
    Gated,
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gconv" => Ok(Scheme::Gconv),
            "diffusion" => Ok(Scheme::Diffusion),
            "gated" => Ok(Scheme::Gated),
            other => Err(format!("unknown message-passing scheme `{other}`")),
        }
    }
}

/// Constant operators derived from one adjacency matrix.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub n: usize,
    /// `normalize_sym(A + I)`.
    pub gcn: Rc<Tensor>,
    /// Powers `P_fwd^1 .. P_fwd^k` of the row-normalised adjacency.
    pub forward_powers: Vec<Rc<Tensor>>,
    /// Powers of the row-normalised transpose.
    pub backward_powers: Vec<Rc<Tensor>>,
    /// In-edges `(src, dst, weight)` with positive weight.
    pub in_edges: Vec<(usize, usize, f64)>,
}

impl PreparedGraph {
    pub fn new(a: &Tensor, diffusion_order: usize) -> Result<Self, GraphError> {
        let n = check_square_nonneg(a)?;
        if diffusion_order < 1 {
            return Err(GraphError::BadOrder);
        }
        let mut with_loops = a.clone();
        for i in 0..n {
            with_loops.set(i, i, a.get(i, i) + 1.0);
        }
        let gcn = Rc::new(normalize_sym(&with_loops)?);
        let powers = |p: Tensor| {
            let mut out = vec![Rc::new(p.clone())];
            for _ in 1..diffusion_order {
                let next = out.last().unwrap().matmul(&p);
                out.push(Rc::new(next));
            }
            out
        };
        let forward_powers = powers(normalize_rows(a)?);
        let backward_powers = powers(normalize_rows(&a.transpose())?);
        let mut in_edges = Vec::new();
        for dst in 0..n {
            for src in 0..n {
                let w = a.get(src, dst);
                if w > 0.0 {
                    in_edges.push((src, dst, w));
                }
            }
        }
        Ok(Self {
            n,
            gcn,
            forward_powers,
            backward_powers,
            in_edges,
        })
    }

    pub fn diffusion_order(&self) -> usize {
        self.forward_powers.len()
    }
}

/// Parameters of one message-passing layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MpParams {
    Gconv {
        lin: Linear,
        activation: Activation,
    },
    Diffusion {
        root: Linear,
        forward: Vec<Linear>,
        backward: Vec<Linear>,
        activation: Activation,
    },
    Gated {
        /// The `[h_i | h_j | a_ji]` projections are kept as three blocks.
        msg_dst: Linear,
        msg_src: Linear,
        msg_edge: Linear,
        gate_dst: Linear,
        gate_src: Linear,
        gate_edge: Linear,
        upd_self: Linear,
        upd_msg: Linear,
    },
}

impl MpParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        scheme: Scheme,
        width: usize,
        diffusion_order: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let lin = |store: &mut ParamStore, suffix: &str, bias: bool, rng: &mut _| {
            Linear::new(store, &format!("{name}.{suffix}"), width, width, bias, rng)
        };
        match scheme {
            Scheme::Gconv => MpParams::Gconv {
                lin: lin(store, "lin", true, rng),
                activation: Activation::Elu,
            },
            Scheme::Diffusion => {
                let root = lin(store, "root", true, rng);
                let forward = (1..=diffusion_order)
                    .map(|q| lin(store, &format!("fwd{q}"), false, rng))
                    .collect();
                let backward = (1..=diffusion_order)
                    .map(|q| lin(store, &format!("bwd{q}"), false, rng))
                    .collect();
                MpParams::Diffusion {
                    root,
                    forward,
                    backward,
                    activation: Activation::Elu,
                }
            }
            Scheme::Gated => MpParams::Gated {
                msg_dst: lin(store, "msg_dst", true, rng),
                msg_src: lin(store, "msg_src", false, rng),
                msg_edge: Linear::new(store, &format!("{name}.msg_edge"), 1, width, false, rng),
                gate_dst: lin(store, "gate_dst", true, rng),
                gate_src: lin(store, "gate_src", false, rng),
                gate_edge: Linear::new(store, &format!("{name}.gate_edge"), 1, width, false, rng),
                upd_self: lin(store, "upd_self", true, rng),
                upd_msg: lin(store, "upd_msg", false, rng),
            },
        }
    }

    pub fn scheme(&self) -> Scheme {
        match self {
            MpParams::Gconv { .. } => Scheme::Gconv,
            MpParams::Diffusion { .. } => Scheme::Diffusion,
            MpParams::Gated { .. } => Scheme::Gated,
        }
    }

    /// Applies the layer to batched features `h` of shape `(B*N) x d`.
    pub fn apply<'t>(
        &self,
        p: &Bound<'t>,
        h: Var<'t>,
        graph: &PreparedGraph,
    ) -> Result<Var<'t>, GraphError> {
        let (rows, _) = h.dims();
        if graph.n == 0 || rows % graph.n != 0 {
            return Err(GraphError::BatchShape {
                rows,
                nodes: graph.n,
            });
        }
        match self {
            MpParams::Gconv { lin, activation } => gconv(p, h, graph, lin, *activation),
            MpParams::Diffusion {
                root,
                forward,
                backward,
                activation,
            } => diffusion_conv(p, h, graph, root, forward, backward, *activation),
            MpParams::Gated { .. } => gated_mp(p, h, graph, self),
        }
    }
}

/// `act(normalize_sym(A + I) H W + b)`.
pub fn gconv<'t>(
    p: &Bound<'t>,
    h: Var<'t>,
    graph: &PreparedGraph,
    lin: &Linear,
    activation: Activation,
) -> Result<Var<'t>, GraphError> {
    let tape = h.tape();
    let a = tape.constant((*graph.gcn).clone());
    let mixed = a.block_matmul(h)?;
    Ok(activation.apply(lin.apply(p, mixed)?)?)
}

/// Bidirectional diffusion convolution of order `forward.len()`.
pub fn diffusion_conv<'t>(
    p: &Bound<'t>,
    h: Var<'t>,
    graph: &PreparedGraph,
    root: &Linear,
    forward: &[Linear],
    backward: &[Linear],
    activation: Activation,
) -> Result<Var<'t>, GraphError> {
    if forward.is_empty() || forward.len() != backward.len() {
        return Err(GraphError::BadOrder);
    }
    if graph.diffusion_order() < forward.len() {
        return Err(GraphError::BadOrder);
    }
    let tape = h.tape();
    let mut out = root.apply(p, h)?;
    for (q, (wf, wb)) in forward.iter().zip(backward).enumerate() {
        let pf = tape.constant((*graph.forward_powers[q]).clone());
        let pb = tape.constant((*graph.backward_powers[q]).clone());
        out = out.add(wf.apply(p, pf.block_matmul(h)?)?)?;
        out = out.add(wb.apply(p, pb.block_matmul(h)?)?)?;
    }
    Ok(activation.apply(out)?)
}

/// Gated message passing with a residual update.
///
/// For each in-edge `j -> i` with weight `a_ji`:
/// `m_ij = elu([h_i|h_j|a_ji] W_m + b_m) * sigmoid([h_i|h_j|a_ji] W_g + b_g)`,
/// aggregated as `agg_i = sum_j a_ji m_ij`, then
/// `h'_i = h_i + elu([h_i|agg_i] W_u + b_u)`.
pub fn gated_mp<'t>(
    p: &Bound<'t>,
    h: Var<'t>,
    graph: &PreparedGraph,
    params: &MpParams,
) -> Result<Var<'t>, GraphError> {
    let MpParams::Gated {
        msg_dst,
        msg_src,
        msg_edge,
        gate_dst,
        gate_src,
        gate_edge,
        upd_self,
        upd_msg,
    } = params
    else {
        unreachable!("gated_mp called with non-gated parameters");
    };
    let tape = h.tape();
    let (rows, width) = h.dims();
    let n = graph.n;
    let batches = rows / n;

    let self_part = upd_self.apply(p, h)?;
    let update = if graph.in_edges.is_empty() {
        self_part
    } else {
        let e = graph.in_edges.len();
        let mut dst_idx = Vec::with_capacity(batches * e);
        let mut src_idx = Vec::with_capacity(batches * e);
        let mut weights = Vec::with_capacity(batches * e);
        for b in 0..batches {
            for &(src, dst, w) in &graph.in_edges {
                dst_idx.push(b * n + dst);
                src_idx.push(b * n + src);
                weights.push(w);
            }
        }
        let dst_idx = Rc::new(dst_idx);
        let src_idx = Rc::new(src_idx);
        let edge_col = tape.constant(Tensor::from_rows(weights.len(), 1, weights.clone()));

        let pre_msg = msg_dst
            .apply(p, h)?
            .gather_rows(Rc::clone(&dst_idx))?
            .add(msg_src.apply(p, h)?.gather_rows(Rc::clone(&src_idx))?)?
            .add(msg_edge.apply(p, edge_col)?)?;
        let pre_gate = gate_dst
            .apply(p, h)?
            .gather_rows(Rc::clone(&dst_idx))?
            .add(gate_src.apply(p, h)?.gather_rows(Rc::clone(&src_idx))?)?
            .add(gate_edge.apply(p, edge_col)?)?;
        let message = pre_msg.elu()?.mul(pre_gate.sigmoid()?)?;
        let agg = message
            .scale_rows(Rc::new(weights))?
            .scatter_add_rows(dst_idx, rows)?;
        self_part.add(upd_msg.apply(p, agg)?)?
    };
    debug_assert_eq!(update.dims(), (rows, width));
    Ok(h.add(update.elu()?)?)
}
