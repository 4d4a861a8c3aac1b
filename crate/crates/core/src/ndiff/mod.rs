//! Minimal dense numeric core with reverse-mode differentiation.
//!
//! [`Tensor`] is a plain value; [`Tape`] records operations on [`Var`]
//! handles and replays them backwards. [`ParamStore`] owns trainable tensors
//! between steps and [`Adam`] updates them.

mod adam;
mod catalog;
mod gradcheck;
mod tape;
mod tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use catalog::{primitive_set, Primitive};
pub use gradcheck::grad_check;
pub use tape::{concat_cols, concat_rows, elu, sigmoid, softmax_rows, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("{op}: range {start}..{end} out of bounds for shape {shape:?}")]
    BadSlice {
        op: &'static str,
        shape: Vec<usize>,
        start: usize,
        end: usize,
    },
    #[error("{op}: unsupported axis {axis}")]
    BadAxis { op: &'static str, axis: usize },
    #[error("{op}: unsupported value {value}")]
    BadParameter { op: &'static str, value: f64 },
    #[error("{op}: no inputs")]
    Empty { op: &'static str },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("parameter `{name}`: gradient shape {grad:?} does not match {param:?}")]
    GradientShape {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
}

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Records every parameter as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| tape.constant(v.clone()))
                .collect(),
        }
    }
}

/// Parameters of a [`ParamStore`] recorded on one tape.
#[derive(Debug, Clone)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps already-recorded variables, in store order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradient of every bound parameter, in store order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::from_rows(rows, cols, v.to_vec())
    }

    #[test]
    fn matmul_example() {
        let tape = Tape::new();
        let a = tape.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(2, 1, &[1.0, 1.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = a.matmul(b).unwrap_err();
        assert_eq!(
            err,
            NdError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 2));
        assert_eq!(x.softmax().unwrap().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn elu_at_minus_one() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-1.0));
        let y = x.elu().unwrap().value().item();
        assert!((y - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((y + 0.6321).abs() < 1e-4);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(1, 3, &[1.0, 2.0, 3.0]));
        let root = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn product_rule_gradient() {
        let tape = Tape::new();
        let a = tape.param(Tensor::scalar(2.0));
        let b = tape.param(Tensor::scalar(3.0));
        let root = a.matmul(b).unwrap().sum().unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(a).item(), 3.0);
        assert_eq!(g.wrt(b).item(), 2.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let a = tape.param(Tensor::zeros(2, 2));
        assert!(matches!(
            tape.backward(a),
            Err(NdError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let tape = Tape::new();
        let a = tape.param(Tensor::filled(2, 3, 1.0));
        let b = tape.param(Tensor::scalar(4.0));
        let root = b.square().unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(a), Tensor::zeros(2, 3));
        assert_eq!(g.wrt(b).item(), 8.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let x0 = t(1, 3, &[0.3, -1.2, 2.0]);
        let once = {
            let tape = Tape::new();
            let x = tape.param(x0.clone());
            let root = x.tanh().unwrap().sum().unwrap();
            tape.backward(root).unwrap().wrt(x)
        };
        let twice = {
            let tape = Tape::new();
            let x = tape.param(x0.clone());
            let f1 = x.tanh().unwrap().sum().unwrap();
            let f2 = x.tanh().unwrap().sum().unwrap();
            let root = f1.add(f2).unwrap();
            tape.backward(root).unwrap().wrt(x)
        };
        assert_eq!(twice, once.scale(2.0));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-1.0));
        assert_eq!(x.ln().unwrap_err(), NdError::NonFinite { op: "log" });
    }

    #[test]
    fn straight_through_forwards_hard_and_routes_gradient() {
        let tape = Tape::new();
        let soft = tape.param(t(1, 2, &[0.3, 0.7]));
        let st = soft.straight_through(t(1, 2, &[0.0, 1.0])).unwrap();
        assert_eq!(st.value().data(), &[0.0, 1.0]);
        let w = tape.constant(t(1, 2, &[2.0, 5.0]));
        let root = st.mul(w).unwrap().sum().unwrap();
        assert_eq!(tape.backward(root).unwrap().wrt(soft).data(), &[2.0, 5.0]);
    }

    #[test]
    fn param_store_binding() {
        let mut store = ParamStore::new();
        let w = store.insert("w", t(1, 2, &[1.0, 2.0]));
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let root = bound.var(w).square().unwrap().sum().unwrap();
        let g = bound.gradients(&tape.backward(root).unwrap());
        assert_eq!(g[0].data(), &[2.0, 4.0]);
        assert_eq!(store.find("w"), Some(w));
        assert_eq!(store.name(w), "w");
    }
}
