//! Catalog of differentiable primitives with input samplers, used to sweep
//! every backward rule against finite differences.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{concat_cols, concat_rows, NdError, Tensor, Var};

type Apply = for<'t> fn(&[Var<'t>]) -> Result<Var<'t>, NdError>;
type Sample = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

/// One registered primitive: how to apply it and how to draw valid inputs.
pub struct Primitive {
    pub name: &'static str,
    pub apply: Apply,
    pub sample: Sample,
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5))
}

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_rows(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect())
}

fn one(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![rand_t(rng, r, c, -2.0, 2.0)]
}

fn positive(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![rand_t(rng, r, c, 0.3, 3.0)]
}

fn away_from_zero(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    let mut t = rand_t(rng, r, c, 0.2, 2.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    vec![t]
}

fn pair(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![rand_t(rng, r, c, -2.0, 2.0), rand_t(rng, r, c, -2.0, 2.0)]
}

fn quotient(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![rand_t(rng, r, c, -2.0, 2.0), rand_t(rng, r, c, 0.5, 2.0)]
}

fn row_pair(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![rand_t(rng, r, c, -2.0, 2.0), rand_t(rng, 1, c, -2.0, 2.0)]
}

fn chain(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (n, k) = dims(rng);
    let m = rng.random_range(1..5);
    vec![rand_t(rng, n, k, -2.0, 2.0), rand_t(rng, k, m, -2.0, 2.0)]
}

fn blocks(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (r, n) = dims(rng);
    let b = rng.random_range(1..4);
    let d = rng.random_range(1..4);
    vec![rand_t(rng, r, n, -2.0, 2.0), rand_t(rng, b * n, d, -2.0, 2.0)]
}

fn square(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let n = rng.random_range(1..5);
    vec![rand_t(rng, n, n, -2.0, 2.0)]
}

fn wide(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let r = rng.random_range(1..5);
    let c = rng.random_range(3..6);
    vec![rand_t(rng, r, c, -2.0, 2.0)]
}

fn row_indices(rows: usize) -> Rc<Vec<usize>> {
    // Repeats and skips rows so both gather and scatter see fan-in.
    Rc::new((0..rows + 2).map(|i| (i * 2 + 1) % rows).collect())
}

/// Every primitive exposed by [`Var`], with samplers that keep inputs inside
/// each primitive's domain and away from kinks.
pub fn primitive_set() -> Vec<Primitive> {
    vec![
        Primitive { name: "add", apply: |v| v[0].add(v[1]), sample: pair },
        Primitive { name: "sub", apply: |v| v[0].sub(v[1]), sample: pair },
        Primitive { name: "mul", apply: |v| v[0].mul(v[1]), sample: pair },
        Primitive { name: "div", apply: |v| v[0].div(v[1]), sample: quotient },
        Primitive { name: "add_row", apply: |v| v[0].add_row(v[1]), sample: row_pair },
        Primitive {
            name: "mul_const",
            apply: |v| {
                let (r, c) = v[0].dims();
                let k = (0..r * c).map(|i| 0.5 - (i as f64).sin()).collect();
                v[0].mul_const(Rc::new(Tensor::from_rows(r, c, k)))
            },
            sample: one,
        },
        Primitive {
            name: "scale_rows",
            apply: |v| {
                let r = v[0].dims().0;
                v[0].scale_rows(Rc::new((0..r).map(|i| i as f64 - 0.5).collect()))
            },
            sample: one,
        },
        Primitive { name: "scale", apply: |v| v[0].scale(-1.7), sample: one },
        Primitive { name: "matmul", apply: |v| v[0].matmul(v[1]), sample: chain },
        Primitive { name: "transpose", apply: |v| v[0].transpose(), sample: one },
        Primitive { name: "block_matmul", apply: |v| v[0].block_matmul(v[1]), sample: blocks },
        Primitive { name: "concat_cols", apply: |v| concat_cols(&[v[0], v[1]]), sample: pair },
        Primitive { name: "concat_rows", apply: |v| concat_rows(&[v[0], v[1]]), sample: pair },
        Primitive {
            name: "slice_cols",
            apply: |v| {
                let c = v[0].dims().1;
                v[0].slice_cols(c / 2, c)
            },
            sample: one,
        },
        Primitive {
            name: "slice_rows",
            apply: |v| {
                let r = v[0].dims().0;
                v[0].slice_rows(0, r.div_ceil(2))
            },
            sample: one,
        },
        Primitive { name: "sum", apply: |v| v[0].sum(), sample: one },
        Primitive { name: "mean", apply: |v| v[0].mean(), sample: one },
        Primitive { name: "sum_axis0", apply: |v| v[0].sum_axis(0), sample: one },
        Primitive { name: "sum_axis1", apply: |v| v[0].sum_axis(1), sample: one },
        Primitive { name: "mean_axis1", apply: |v| v[0].mean_axis(1), sample: one },
        Primitive { name: "exp", apply: |v| v[0].exp(), sample: one },
        Primitive { name: "log", apply: |v| v[0].ln(), sample: positive },
        Primitive { name: "tanh", apply: |v| v[0].tanh(), sample: one },
        Primitive { name: "sigmoid", apply: |v| v[0].sigmoid(), sample: one },
        Primitive { name: "elu", apply: |v| v[0].elu(), sample: away_from_zero },
        Primitive { name: "abs", apply: |v| v[0].abs(), sample: away_from_zero },
        Primitive { name: "square", apply: |v| v[0].square(), sample: one },
        Primitive { name: "sqrt", apply: |v| v[0].sqrt(), sample: positive },
        Primitive { name: "softmax", apply: |v| v[0].softmax(), sample: wide },
        Primitive { name: "trace", apply: |v| v[0].trace(), sample: square },
        Primitive { name: "norm", apply: |v| v[0].norm(), sample: away_from_zero },
        Primitive {
            name: "gather_rows",
            apply: |v| {
                let r = v[0].dims().0;
                v[0].gather_rows(row_indices(r))
            },
            sample: one,
        },
        Primitive {
            name: "scatter_add_rows",
            apply: |v| {
                let r = v[0].dims().0;
                let idx: Vec<usize> = (0..r).map(|i| (i * 3) % (r + 1)).collect();
                v[0].scatter_add_rows(Rc::new(idx), r + 1)
            },
            sample: one,
        },
        Primitive { name: "tile_rows", apply: |v| v[0].tile_rows(3), sample: one },
    ]
}
