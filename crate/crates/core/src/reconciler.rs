//! Projection onto coherent forecasts and the composite training loss.
//!
//! `P = I - Qᵀ(QQᵀ)⁻¹Q` is built from a Cholesky solve of `(QQᵀ)Z = Q`.
//! It depends only on the hard hierarchy, so it enters the tape as a
//! constant and is rebuilt whenever the selections change.

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecaster::forecast_loss;
use crate::ndiff::{NdError, Tensor, Var};

/// Collections larger than this use the residual penalty under `Auto`.
pub const AUTO_PROJECTION_LIMIT: usize = 2000;

const JITTER: f64 = 1e-10;
/// Pivots with `l_ii² <= PIVOT_TOL * g_ii` mark a dependent constraint row.
const PIVOT_TOL: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum ReconcileError {
    #[error("{op}: expected {expected} rows, got {actual}")]
    Shape {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("Q is rank deficient; dependent constraint rows {rows:?}")]
    RankDeficient { rows: Vec<usize> },
    #[error("projection mode needs reconciled forecasts")]
    MissingReconciled,
    #[error(transparent)]
    Nd(#[from] NdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconcileMode {
    Auto,
    Projection,
    ResidualPenalty,
}

impl ReconcileMode {
    /// Picks a concrete mode for a collection of `m` series.
    pub fn resolve(self, m: usize) -> ReconcileMode {
        match self {
            ReconcileMode::Auto if m <= AUTO_PROJECTION_LIMIT => ReconcileMode::Projection,
            ReconcileMode::Auto => ReconcileMode::ResidualPenalty,
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda: f64,
    pub p: u8,
    pub mincut_weight: f64,
    pub mode: ReconcileMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.25,
            p: 1,
            mincut_weight: 1.0,
            mode: ReconcileMode::Auto,
        }
    }
}

/// Lower-triangular `L` with `G = L Lᵀ`, row-major; `Err(row)` names the
/// first non-positive pivot.
fn cholesky(g: &Tensor, jitter: f64) -> Result<Vec<f64>, usize> {
    let n = g.rows();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = g.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                s += jitter;
                if s <= 0.0 || !s.is_finite() {
                    return Err(i);
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ X = B` in place, column by column.
fn cholesky_solve(l: &[f64], n: usize, b: &mut Tensor) {
    let cols = b.cols();
    let data = b.data_mut();
    for c in 0..cols {
        for i in 0..n {
            let mut s = data[i * cols + c];
            for k in 0..i {
                s -= l[i * n + k] * data[k * cols + c];
            }
            data[i * cols + c] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = data[i * cols + c];
            for k in i + 1..n {
                s -= l[k * n + i] * data[k * cols + c];
            }
            data[i * cols + c] = s / l[i * n + i];
        }
    }
}

/// Orthogonal projector onto the null space of `Q`.
///
/// Building it costs `O(A³ + A²M + AM²)` time for `A` aggregate rows and
/// `M` series, and `P` itself takes `O(M²)` memory. Each application is a
/// dense `M x M` product, `O(M²)` per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    p: Rc<Tensor>,
    q: Rc<Tensor>,
}

impl Projector {
    pub fn new(q: &Tensor) -> Result<Self, ReconcileError> {
        let (a, m) = q.dims();
        let mut p = Tensor::eye(m);
        if a > 0 {
            let gram = q.matmul(&q.transpose());
            let l = match cholesky(&gram, 0.0) {
                Ok(l) => l,
                Err(_) => cholesky(&gram, JITTER)
                    .map_err(|row| ReconcileError::RankDeficient { rows: vec![row] })?,
            };
            let weak: Vec<usize> = (0..a)
                .filter(|&i| l[i * a + i].powi(2) <= PIVOT_TOL * gram.get(i, i))
                .collect();
            if !weak.is_empty() {
                return Err(ReconcileError::RankDeficient { rows: weak });
            }
            let mut z = q.clone();
            cholesky_solve(&l, a, &mut z);
            let qtz = q.transpose().matmul(&z);
            p = p.sub(&qtz);
            let pt = p.transpose();
            p = p.zip_map(&pt, |x, y| 0.5 * (x + y));
        }
        Ok(Self {
            p: Rc::new(p),
            q: Rc::new(q.clone()),
        })
    }

    pub fn p(&self) -> &Tensor {
        &self.p
    }

    pub fn q(&self) -> &Tensor {
        &self.q
    }

    /// Number of stacked series `M`.
    pub fn size(&self) -> usize {
        self.p.rows()
    }

    /// `P Ŷ` for a batch laid out as `B` stacked `M x H` blocks.
    pub fn apply_var<'t>(&self, y_hat: Var<'t>) -> Result<Var<'t>, NdError> {
        y_hat.tape().constant((*self.p).clone()).block_matmul(y_hat)
    }
}

/// `Ȳ = P Ŷ`.
pub fn reconcile(y_hat: &Tensor, projector: &Projector) -> Result<Tensor, ReconcileError> {
    if y_hat.rows() != projector.size() {
        return Err(ReconcileError::Shape {
            op: "reconcile",
            expected: projector.size(),
            actual: y_hat.rows(),
        });
    }
    Ok(projector.p().matmul(y_hat))
}

/// `‖QY‖₂` over all horizon columns.
pub fn coherency_residual(q: &Tensor, y: &Tensor) -> Result<f64, ReconcileError> {
    if y.rows() != q.cols() {
        return Err(ReconcileError::Shape {
            op: "coherency_residual",
            expected: q.cols(),
            actual: y.rows(),
        });
    }
    Ok(q.matmul(y).frobenius())
}

/// Mean over the batch of per-sample `‖QŶ‖₂`.
fn residual_penalty<'t>(y_hat: Var<'t>, q: &Tensor) -> Result<Var<'t>, NdError> {
    let tape = y_hat.tape();
    let (a, m) = q.dims();
    if a == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let batch = y_hat.dims().0 / m;
    let r = tape.constant(q.clone()).block_matmul(y_hat)?;
    let per_row = r.square()?.sum_axis(1)?;
    let per_sample = tape
        .constant(Tensor::filled(1, a, 1.0))
        .block_matmul(per_row)?
        .sqrt()?;
    per_sample.sum()?.scale(1.0 / batch as f64)
}

/// Projection mode: `L(Ŷ,Y) + L(Ȳ,Y) + λ L(Ȳ,Ŷ)`.
/// Residual mode: `L(Ŷ,Y) + λ ‖QŶ‖₂`.
///
/// All stacks share one layout (`B` blocks of `M x H`); `mask` weights the
/// entries of `Y`.
pub fn composite_loss<'t>(
    y_hat: Var<'t>,
    y_bar: Option<Var<'t>>,
    y: Var<'t>,
    q: &Tensor,
    weights: &LossWeights,
    mask: Option<&Rc<Tensor>>,
) -> Result<Var<'t>, ReconcileError> {
    let m = q.cols();
    if m == 0 || y_hat.dims().0 % m != 0 {
        return Err(ReconcileError::Shape {
            op: "composite_loss",
            expected: m,
            actual: y_hat.dims().0,
        });
    }
    let base = forecast_loss(y_hat, y, weights.p, mask)?;
    match weights.mode.resolve(m) {
        ReconcileMode::ResidualPenalty => {
            let pen = residual_penalty(y_hat, q)?;
            Ok(base.add(pen.scale(weights.lambda)?)?)
        }
        _ => {
            let y_bar = y_bar.ok_or(ReconcileError::MissingReconciled)?;
            let rec = forecast_loss(y_bar, y, weights.p, mask)?;
            let total = base.add(rec)?;
            if weights.lambda == 0.0 {
                return Ok(total);
            }
            let gap = forecast_loss(y_bar, y_hat, weights.p, None)?;
            Ok(total.add(gap.scale(weights.lambda)?)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{build_c, build_q, SelectionMatrix};
    use crate::ndiff::Tape;

    fn five_node_q() -> Tensor {
        build_q(
            &build_c(&[
                SelectionMatrix::new(vec![0, 0, 0, 1, 1], 2).unwrap(),
                SelectionMatrix::total(2),
            ])
            .unwrap(),
        )
    }

    fn stack() -> Tensor {
        Tensor::column(&[15.0, 6.0, 9.0, 1.0, 2.0, 3.0, 4.0, 5.0])
    }

    #[test]
    fn five_node_projector_properties() {
        let q = five_node_q();
        let pr = Projector::new(&q).unwrap();
        let p = pr.p();
        assert!(q.matmul(p).max_abs() < 1e-12);
        assert!(p.matmul(p).sub(p).frobenius() < 1e-10);
        assert_eq!(p.sub(&p.transpose()).frobenius(), 0.0);
        let y = stack();
        assert!(reconcile(&y, &pr).unwrap().sub(&y).max_abs() < 1e-10);
    }

    #[test]
    fn empty_constraints_give_identity() {
        let pr = Projector::new(&Tensor::zeros(0, 4)).unwrap();
        assert_eq!(pr.p(), &Tensor::eye(4));
    }

    #[test]
    fn rank_deficiency_names_row() {
        let q = Tensor::from_nested(&[vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0]]);
        assert_eq!(
            Projector::new(&q).unwrap_err(),
            ReconcileError::RankDeficient { rows: vec![1] }
        );
    }

    #[test]
    fn residual_of_perturbed_stack() {
        let q = five_node_q();
        assert_eq!(coherency_residual(&q, &stack()).unwrap(), 0.0);
        let mut y = stack();
        y.set(0, 0, 16.0);
        assert_eq!(coherency_residual(&q, &y).unwrap(), 1.0);
        let rec = reconcile(&y, &Projector::new(&q).unwrap()).unwrap();
        assert!(q.matmul(&rec).max_abs() < 1e-12);
        assert!(coherency_residual(&q, &Tensor::zeros(3, 1)).is_err());
    }

    #[test]
    fn mode_resolution() {
        assert_eq!(ReconcileMode::Auto.resolve(2000), ReconcileMode::Projection);
        assert_eq!(ReconcileMode::Auto.resolve(2001), ReconcileMode::ResidualPenalty);
        assert_eq!(ReconcileMode::Projection.resolve(5000), ReconcileMode::Projection);
    }

    #[test]
    fn coherent_perfect_forecast_has_zero_loss() {
        let q = five_node_q();
        let pr = Projector::new(&q).unwrap();
        let tape = Tape::new();
        let y = tape.constant(stack());
        let y_bar = pr.apply_var(y).unwrap();
        let w = LossWeights::default();
        let l = composite_loss(y, Some(y_bar), y, &q, &w, None).unwrap();
        assert!(l.value().item().abs() < 1e-12);
        let w = LossWeights {
            mode: ReconcileMode::ResidualPenalty,
            ..w
        };
        assert_eq!(composite_loss(y, None, y, &q, &w, None).unwrap().value().item(), 0.0);
    }

    #[test]
    fn projection_mode_requires_reconciled() {
        let q = five_node_q();
        let tape = Tape::new();
        let y = tape.constant(stack());
        let w = LossWeights {
            mode: ReconcileMode::Projection,
            ..LossWeights::default()
        };
        assert_eq!(
            composite_loss(y, None, y, &q, &w, None).unwrap_err(),
            ReconcileError::MissingReconciled
        );
    }
}
