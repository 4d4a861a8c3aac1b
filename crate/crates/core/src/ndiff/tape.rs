//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to run its vector-Jacobian product later. Nodes are only ever
//! appended, so insertion order is a topological order and `backward` is a
//! single reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use super::NdError;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulConst(usize, Rc<Tensor>),
    ScaleRows(usize, Rc<Vec<f64>>),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    BlockMatmul(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Elu(usize),
    Abs(usize),
    Square(usize),
    Sqrt(usize),
    SoftmaxRows(usize),
    Trace(usize),
    Frobenius(usize),
    GatherRows(usize, Rc<Vec<usize>>),
    ScatterAddRows(usize, Rc<Vec<usize>>),
    TileRows(usize, usize),
    StraightThrough(usize),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        write!(f, "Var#{}{:?}", self.id, v.shape())
    }
}

/// Gradients of a scalar root with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the root does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.by_id(var.id)
    }

    pub fn by_id(&self, id: usize) -> Tensor {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_checked(
        &self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var<'_>, NdError> {
        if !value.is_finite() {
            return Err(NdError::NonFinite { op: name });
        }
        Ok(self.push(value, op, requires_grad))
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Accumulates gradients of the scalar `root` into every node it depends on.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, NdError> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.dims();
        if root_shape != (1, 1) {
            return Err(NdError::NonScalarRoot {
                shape: nodes[root.id].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::scalar(1.0));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.dims()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            accumulate(grads, nodes, *a, g.zip_map(val(*b), |x, y| x * y));
            accumulate(grads, nodes, *b, g.zip_map(val(*a), |x, y| x * y));
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            accumulate(grads, nodes, *a, g.zip_map(bv, |x, y| x / y));
            let av = val(*a);
            let mut gb = g.clone();
            for ((o, &x), &y) in gb.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                *o = -*o * x / (y * y);
            }
            accumulate(grads, nodes, *b, gb);
        }
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, sum_rows(g));
        }
        Op::MulConst(a, c) => accumulate(grads, nodes, *a, g.zip_map(c, |x, y| x * y)),
        Op::ScaleRows(a, factors) => {
            let mut ga = g.clone();
            let cols = ga.cols();
            for (r, f) in factors.iter().enumerate() {
                for v in &mut ga.data_mut()[r * cols..(r + 1) * cols] {
                    *v *= f;
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Scale(a, k) => accumulate(grads, nodes, *a, g.scale(*k)),
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (n, k) = av.dims();
            let m = bv.cols();
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; n * k];
                matmul_nt_into(g.data(), bv.data(), &mut ga, n, m, k);
                accumulate(grads, nodes, *a, Tensor::from_rows(n, k, ga));
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; k * m];
                matmul_tn_into(av.data(), g.data(), &mut gb, n, k, m);
                accumulate(grads, nodes, *b, Tensor::from_rows(k, m, gb));
            }
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, g.transpose()),
        Op::BlockMatmul(m, h) => {
            let (mv, hv) = (val(*m), val(*h));
            let (r, n) = mv.dims();
            let d = hv.cols();
            let blocks = hv.rows() / n.max(1);
            if nodes[*m].requires_grad {
                let mut gm = vec![0.0; r * n];
                for b in 0..blocks {
                    let gb = &g.data()[b * r * d..(b + 1) * r * d];
                    let hb = &hv.data()[b * n * d..(b + 1) * n * d];
                    matmul_nt_into(gb, hb, &mut gm, r, d, n);
                }
                accumulate(grads, nodes, *m, Tensor::from_rows(r, n, gm));
            }
            if nodes[*h].requires_grad {
                let mut gh = vec![0.0; blocks * n * d];
                for b in 0..blocks {
                    let gb = &g.data()[b * r * d..(b + 1) * r * d];
                    matmul_tn_into(mv.data(), gb, &mut gh[b * n * d..(b + 1) * n * d], r, n, d);
                }
                accumulate(grads, nodes, *h, Tensor::from_rows(blocks * n, d, gh));
            }
        }
        Op::ConcatCols(parts) => {
            let (rows, total) = g.dims();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                if nodes[p].requires_grad {
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, nodes, p, Tensor::from_rows(rows, w, gp));
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let cols = g.cols();
            let mut offset = 0;
            for &p in parts {
                let rows = val(p).rows();
                let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                accumulate(grads, nodes, p, Tensor::from_rows(rows, cols, slice));
                offset += rows;
            }
        }
        Op::SliceCols(a, start) => {
            let (rows, cols) = val(*a).dims();
            let w = g.cols();
            let mut ga = Tensor::zeros(rows, cols);
            for r in 0..rows {
                ga.data_mut()[r * cols + start..r * cols + start + w]
                    .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::SliceRows(a, start) => {
            let (rows, cols) = val(*a).dims();
            let mut ga = Tensor::zeros(rows, cols);
            ga.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
            accumulate(grads, nodes, *a, ga);
        }
        Op::SumAll(a) => {
            let (r, c) = val(*a).dims();
            accumulate(grads, nodes, *a, Tensor::filled(r, c, g.item()));
        }
        Op::SumRows(a) => {
            let (r, c) = val(*a).dims();
            let mut ga = Vec::with_capacity(r * c);
            for _ in 0..r {
                ga.extend_from_slice(g.data());
            }
            accumulate(grads, nodes, *a, Tensor::from_rows(r, c, ga));
        }
        Op::SumCols(a) => {
            let (r, c) = val(*a).dims();
            let mut ga = Vec::with_capacity(r * c);
            for i in 0..r {
                ga.extend(std::iter::repeat_n(g.data()[i], c));
            }
            accumulate(grads, nodes, *a, Tensor::from_rows(r, c, ga));
        }
        Op::Exp(a) => accumulate(grads, nodes, *a, g.zip_map(out, |x, y| x * y)),
        Op::Log(a) => accumulate(grads, nodes, *a, g.zip_map(val(*a), |x, y| x / y)),
        Op::Tanh(a) => accumulate(grads, nodes, *a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
        Op::Sigmoid(a) => {
            accumulate(grads, nodes, *a, g.zip_map(out, |x, y| x * y * (1.0 - y)))
        }
        Op::Elu(a) => accumulate(
            grads,
            nodes,
            *a,
            g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { x * y.exp() }),
        ),
        Op::Abs(a) => accumulate(
            grads,
            nodes,
            *a,
            g.zip_map(val(*a), |x, y| {
                if y > 0.0 {
                    x
                } else if y < 0.0 {
                    -x
                } else {
                    0.0
                }
            }),
        ),
        Op::Square(a) => accumulate(grads, nodes, *a, g.zip_map(val(*a), |x, y| 2.0 * x * y)),
        Op::Sqrt(a) => accumulate(
            grads,
            nodes,
            *a,
            g.zip_map(out, |x, y| if y > 0.0 { 0.5 * x / y } else { 0.0 }),
        ),
        Op::SoftmaxRows(a) => {
            let (r, c) = out.dims();
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                let s = out.row_slice(i);
                let gr = g.row_slice(i);
                let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    ga[i * c + j] = s[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, nodes, *a, Tensor::from_rows(r, c, ga));
        }
        Op::Trace(a) => {
            let n = val(*a).rows();
            accumulate(grads, nodes, *a, Tensor::eye(n).scale(g.item()));
        }
        Op::Frobenius(a) => {
            let norm = out.item();
            let ga = if norm > 0.0 {
                val(*a).scale(g.item() / norm)
            } else {
                let (r, c) = val(*a).dims();
                Tensor::zeros(r, c)
            };
            accumulate(grads, nodes, *a, ga);
        }
        Op::GatherRows(a, idx) => {
            let (r, c) = val(*a).dims();
            accumulate(grads, nodes, *a, scatter_rows(g, idx, r, c));
        }
        Op::ScatterAddRows(a, idx) => accumulate(grads, nodes, *a, gather_rows(g, idx)),
        Op::TileRows(a, reps) => {
            let (r, c) = val(*a).dims();
            let mut ga = vec![0.0; r * c];
            for b in 0..*reps {
                for (o, v) in ga.iter_mut().zip(&g.data()[b * r * c..(b + 1) * r * c]) {
                    *o += v;
                }
            }
            accumulate(grads, nodes, *a, Tensor::from_rows(r, c, ga));
        }
        Op::StraightThrough(soft) => accumulate(grads, nodes, *soft, g.clone()),
    }
}

fn sum_rows(t: &Tensor) -> Tensor {
    let (r, c) = t.dims();
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
            *o += v;
        }
    }
    Tensor::from_rows(1, c, out)
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(t.row_slice(i));
    }
    Tensor::from_rows(idx.len(), c, out)
}

fn scatter_rows(t: &Tensor, idx: &[usize], rows: usize, cols: usize) -> Tensor {
    let mut out = Tensor::zeros(rows, cols);
    for (q, &i) in idx.iter().enumerate() {
        let src = t.row_slice(q);
        for (o, v) in out.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(src) {
            *o += v;
        }
    }
    out
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NdError {
    NdError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.value().dims()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables recorded on different tapes"
        );
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: fn(usize) -> Op,
    ) -> Result<Var<'t>, NdError> {
        let v = self.value().map(f);
        self.tape
            .push_checked(name, v, op(self.id), self.tape.requires(&[self.id]))
    }

    fn binary_same(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>, NdError> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.dims() != b.dims() {
            return Err(mismatch(name, &a, &b));
        }
        let v = a.zip_map(&b, f);
        self.tape.push_checked(
            name,
            v,
            op(self.id, other.id),
            self.tape.requires(&[self.id, other.id]),
        )
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>, NdError> {
        self.binary_same(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>, NdError> {
        self.binary_same(other, "sub", |a, b| a - b, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>, NdError> {
        self.binary_same(other, "mul", |a, b| a * b, Op::Mul)
    }

    /// Elementwise quotient.
    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>, NdError> {
        self.binary_same(other, "div", |a, b| a / b, Op::Div)
    }

    /// Adds a `1 x c` row to every row.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>, NdError> {
        self.same_tape(&row);
        let (a, b) = (self.value(), row.value());
        let (r, c) = a.dims();
        if b.dims() != (1, c) {
            return Err(mismatch("add_row", &a, &b));
        }
        let mut v = (*a).clone();
        for i in 0..r {
            for (o, x) in v.data_mut()[i * c..(i + 1) * c].iter_mut().zip(b.data()) {
                *o += x;
            }
        }
        self.tape.push_checked(
            "add_row",
            v,
            Op::AddRow(self.id, row.id),
            self.tape.requires(&[self.id, row.id]),
        )
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&self, c: Rc<Tensor>) -> Result<Var<'t>, NdError> {
        let a = self.value();
        if a.dims() != c.dims() {
            return Err(mismatch("mul_const", &a, &c));
        }
        let v = a.zip_map(&c, |x, y| x * y);
        self.tape.push_checked(
            "mul_const",
            v,
            Op::MulConst(self.id, c),
            self.tape.requires(&[self.id]),
        )
    }

    /// Adds a constant of the same shape.
    pub fn add_const(&self, c: &Tensor) -> Result<Var<'t>, NdError> {
        let k = self.tape.constant(c.clone());
        self.add(k)
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&self, factors: Rc<Vec<f64>>) -> Result<Var<'t>, NdError> {
        let a = self.value();
        let (r, c) = a.dims();
        if factors.len() != r {
            return Err(NdError::ShapeMismatch {
                op: "scale_rows",
                lhs: a.shape().to_vec(),
                rhs: vec![factors.len()],
            });
        }
        let mut v = (*a).clone();
        for (i, f) in factors.iter().enumerate() {
            for x in &mut v.data_mut()[i * c..(i + 1) * c] {
                *x *= f;
            }
        }
        self.tape.push_checked(
            "scale_rows",
            v,
            Op::ScaleRows(self.id, factors),
            self.tape.requires(&[self.id]),
        )
    }

    pub fn scale(&self, k: f64) -> Result<Var<'t>, NdError> {
        let v = self.value().scale(k);
        self.tape
            .push_checked("scale", v, Op::Scale(self.id, k), self.tape.requires(&[self.id]))
    }

    pub fn neg(&self) -> Result<Var<'t>, NdError> {
        self.scale(-1.0)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>, NdError> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (n, k) = a.dims();
        let (k2, m) = b.dims();
        if k != k2 {
            return Err(mismatch("matmul", &a, &b));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(a.data(), b.data(), &mut out, n, k, m);
        self.tape.push_checked(
            "matmul",
            Tensor::from_rows(n, m, out),
            Op::Matmul(self.id, other.id),
            self.tape.requires(&[self.id, other.id]),
        )
    }

    pub fn transpose(&self) -> Result<Var<'t>, NdError> {
        let v = self.value().transpose();
        self.tape.push_checked(
            "transpose",
            v,
            Op::Transpose(self.id),
            self.tape.requires(&[self.id]),
        )
    }

    /// Left-multiplies each of the stacked row blocks of `blocks` by `self`.
    ///
    /// `self` is `r x n`, `blocks` is `(B*n) x d`; the result is `(B*r) x d`
    /// with block `b` equal to `self * blocks[b]`.
    pub fn block_matmul(&self, blocks: Var<'t>) -> Result<Var<'t>, NdError> {
        self.same_tape(&blocks);
        let (m, h) = (self.value(), blocks.value());
        let (r, n) = m.dims();
        let (hr, d) = h.dims();
        if n == 0 || hr % n != 0 {
            return Err(mismatch("block_matmul", &m, &h));
        }
        let nb = hr / n;
        let mut out = vec![0.0; nb * r * d];
        for b in 0..nb {
            matmul_into(
                m.data(),
                &h.data()[b * n * d..(b + 1) * n * d],
                &mut out[b * r * d..(b + 1) * r * d],
                r,
                n,
                d,
            );
        }
        self.tape.push_checked(
            "block_matmul",
            Tensor::from_rows(nb * r, d, out),
            Op::BlockMatmul(self.id, blocks.id),
            self.tape.requires(&[self.id, blocks.id]),
        )
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>, NdError> {
        let a = self.value();
        let (r, c) = a.dims();
        if start > end || end > c {
            return Err(NdError::BadSlice {
                op: "slice_cols",
                shape: a.shape().to_vec(),
                start,
                end,
            });
        }
        let w = end - start;
        let mut v = Vec::with_capacity(r * w);
        for i in 0..r {
            v.extend_from_slice(&a.row_slice(i)[start..end]);
        }
        self.tape.push_checked(
            "slice_cols",
            Tensor::from_rows(r, w, v),
            Op::SliceCols(self.id, start),
            self.tape.requires(&[self.id]),
        )
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>, NdError> {
        let a = self.value();
        let (r, c) = a.dims();
        if start > end || end > r {
            return Err(NdError::BadSlice {
                op: "slice_rows",
                shape: a.shape().to_vec(),
                start,
                end,
            });
        }
        let v = a.data()[start * c..end * c].to_vec();
        self.tape.push_checked(
            "slice_rows",
            Tensor::from_rows(end - start, c, v),
            Op::SliceRows(self.id, start),
            self.tape.requires(&[self.id]),
        )
    }

    pub fn sum(&self) -> Result<Var<'t>, NdError> {
        let v = Tensor::scalar(self.value().sum());
        self.tape
            .push_checked("sum", v, Op::SumAll(self.id), self.tape.requires(&[self.id]))
    }

    pub fn mean(&self) -> Result<Var<'t>, NdError> {
        let n = self.value().len().max(1);
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum over `axis` (0 collapses rows into a `1 x c` row, 1 collapses
    /// columns into an `r x 1` column).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>, NdError> {
        let a = self.value();
        let (r, c) = a.dims();
        let (v, op) = match axis {
            0 => (sum_rows(&a), Op::SumRows(self.id)),
            1 => {
                let v: Vec<f64> = (0..r).map(|i| a.row_slice(i).iter().sum()).collect();
                (Tensor::from_rows(r, 1, v), Op::SumCols(self.id))
            }
            _ => {
                return Err(NdError::BadAxis {
                    op: "sum_axis",
                    axis,
                })
            }
        };
        let _ = c;
        self.tape
            .push_checked("sum_axis", v, op, self.tape.requires(&[self.id]))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>, NdError> {
        let (r, c) = self.dims();
        let n = if axis == 0 { r } else { c };
        self.sum_axis(axis)?.scale(1.0 / n.max(1) as f64)
    }

    pub fn exp(&self) -> Result<Var<'t>, NdError> {
        self.unary("exp", f64::exp, Op::Exp)
    }

    pub fn ln(&self) -> Result<Var<'t>, NdError> {
        self.unary("log", f64::ln, Op::Log)
    }

    pub fn tanh(&self) -> Result<Var<'t>, NdError> {
        self.unary("tanh", f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>, NdError> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid)
    }

    /// Exponential linear unit with unit slope parameter.
    pub fn elu(&self) -> Result<Var<'t>, NdError> {
        self.unary("elu", elu, Op::Elu)
    }

    pub fn abs(&self) -> Result<Var<'t>, NdError> {
        self.unary("abs", f64::abs, Op::Abs)
    }

    pub fn square(&self) -> Result<Var<'t>, NdError> {
        self.unary("square", |x| x * x, Op::Square)
    }

    pub fn sqrt(&self) -> Result<Var<'t>, NdError> {
        self.unary("sqrt", f64::sqrt, Op::Sqrt)
    }

    /// Softmax over the last axis (each row).
    pub fn softmax(&self) -> Result<Var<'t>, NdError> {
        let v = softmax_rows(&self.value());
        self.tape.push_checked(
            "softmax",
            v,
            Op::SoftmaxRows(self.id),
            self.tape.requires(&[self.id]),
        )
    }

    pub fn trace(&self) -> Result<Var<'t>, NdError> {
        let a = self.value();
        let (r, c) = a.dims();
        if r != c {
            return Err(mismatch("trace", &a, &a));
        }
        let t = (0..r).map(|i| a.get(i, i)).sum();
        self.tape.push_checked(
            "trace",
            Tensor::scalar(t),
            Op::Trace(self.id),
            self.tape.requires(&[self.id]),
        )
    }

    /// Frobenius norm; the L2 norm for vectors.
    pub fn norm(&self) -> Result<Var<'t>, NdError> {
        let v = Tensor::scalar(self.value().frobenius());
        self.tape
            .push_checked("norm", v, Op::Frobenius(self.id), self.tape.requires(&[self.id]))
    }

    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Result<Var<'t>, NdError> {
        let a = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= a.rows()) {
            return Err(NdError::BadSlice {
                op: "gather_rows",
                shape: a.shape().to_vec(),
                start: bad,
                end: bad + 1,
            });
        }
        let v = gather_rows(&a, &idx);
        self.tape.push_checked(
            "gather_rows",
            v,
            Op::GatherRows(self.id, idx),
            self.tape.requires(&[self.id]),
        )
    }

    /// Row `q` of `self` is added into output row `idx[q]`.
    pub fn scatter_add_rows(&self, idx: Rc<Vec<usize>>, rows: usize) -> Result<Var<'t>, NdError> {
        let a = self.value();
        if idx.len() != a.rows() || idx.iter().any(|&i| i >= rows) {
            return Err(NdError::BadSlice {
                op: "scatter_add_rows",
                shape: a.shape().to_vec(),
                start: 0,
                end: rows,
            });
        }
        let v = scatter_rows(&a, &idx, rows, a.cols());
        self.tape.push_checked(
            "scatter_add_rows",
            v,
            Op::ScatterAddRows(self.id, idx),
            self.tape.requires(&[self.id]),
        )
    }

    /// Stacks `reps` copies of `self` vertically.
    pub fn tile_rows(&self, reps: usize) -> Result<Var<'t>, NdError> {
        let a = self.value();
        let (r, c) = a.dims();
        let mut v = Vec::with_capacity(reps * r * c);
        for _ in 0..reps {
            v.extend_from_slice(a.data());
        }
        self.tape.push_checked(
            "tile_rows",
            Tensor::from_rows(reps * r, c, v),
            Op::TileRows(self.id, reps),
            self.tape.requires(&[self.id]),
        )
    }

    /// Forward value `hard`, gradient routed unchanged to `self`.
    pub fn straight_through(&self, hard: Tensor) -> Result<Var<'t>, NdError> {
        let soft = self.value();
        if soft.dims() != hard.dims() {
            return Err(mismatch("straight_through", &soft, &hard));
        }
        self.tape.push_checked(
            "straight_through",
            hard,
            Op::StraightThrough(self.id),
            self.tape.requires(&[self.id]),
        )
    }
}

/// Column-wise concatenation of equally tall matrices.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>, NdError> {
    let first = parts.first().ok_or(NdError::Empty { op: "concat_cols" })?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
    let rows = values[0].rows();
    for v in &values {
        if v.rows() != rows {
            return Err(mismatch("concat_cols", &values[0], v));
        }
    }
    let total: usize = values.iter().map(|v| v.cols()).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for v in &values {
            out.extend_from_slice(v.row_slice(r));
        }
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let req = tape.requires(&ids);
    tape.push_checked(
        "concat_cols",
        Tensor::from_rows(rows, total, out),
        Op::ConcatCols(ids),
        req,
    )
}

/// Row-wise concatenation of equally wide matrices.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>, NdError> {
    let first = parts.first().ok_or(NdError::Empty { op: "concat_rows" })?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
    let cols = values[0].cols();
    let mut out = Vec::new();
    let mut rows = 0;
    for v in &values {
        if v.cols() != cols {
            return Err(mismatch("concat_rows", &values[0], v));
        }
        out.extend_from_slice(v.data());
        rows += v.rows();
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let req = tape.requires(&ids);
    tape.push_checked(
        "concat_rows",
        Tensor::from_rows(rows, cols, out),
        Op::ConcatRows(ids),
        req,
    )
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Numerically stable row softmax of a plain tensor.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let (r, c) = a.dims();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = a.row_slice(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            out[i * c + j] = e;
            total += e;
        }
        for v in &mut out[i * c..(i + 1) * c] {
            *v /= total;
        }
    }
    Tensor::from_rows(r, c, out)
}
