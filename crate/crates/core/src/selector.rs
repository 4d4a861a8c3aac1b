//! Learnable hard clustering.
//!
//! Each learnable level owns a score table `Φ^(k)` (`N_{k-1} x N_k`).
//! Training draws a hard one-hot assignment by perturbing the tempered
//! scores with Gumbel noise and taking the row argmax; gradients reach `Φ`
//! through the tempered softmax of the same perturbed scores. A level of
//! size one is the total aggregate and has no scores.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Gumbel, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{HierarchyError, SelectionMatrix};
use crate::ndiff::{softmax_rows, Bound, NdError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error, PartialEq)]
pub enum SelectorError {
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("cluster sizes must be at least 1, level {level} has {size}")]
    BadLevelSize { level: usize, size: usize },
    #[error("expected {expected} selector levels, got {actual}")]
    LevelCount { expected: usize, actual: usize },
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

/// Exponential temperature schedule `max(floor, tau0 * rate^step)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealConfig {
    pub tau0: f64,
    pub rate: f64,
    pub floor: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            tau0: 1.0,
            rate: 0.999,
            floor: 0.05,
        }
    }
}

pub fn anneal_tau(config: &AnnealConfig, step: u64) -> f64 {
    let exponent = step.min(i32::MAX as u64) as i32;
    (config.tau0 * config.rate.powi(exponent)).max(config.floor)
}

/// One hard draw for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSelection {
    pub hard: SelectionMatrix,
    /// Score table the draw came from; `None` for the fixed total level.
    pub scores: Option<ParamId>,
    /// Gumbel perturbation added to `Φ / τ`; all zeros in deterministic mode.
    pub noise: Tensor,
    pub tau: f64,
}

impl SampledSelection {
    /// `softmax(Φ/τ + g)` recorded on the tape.
    pub fn soft<'t>(&self, phi: Var<'t>) -> Result<Var<'t>, NdError> {
        phi.scale(1.0 / self.tau)?.add_const(&self.noise)?.softmax()
    }

    /// Hard matrix in the forward pass, soft gradient in the backward pass.
    /// The fixed total level is a constant.
    pub fn straight_through<'t>(&self, tape: &'t Tape, scores: &Bound<'t>) -> Result<Var<'t>, NdError> {
        match self.scores {
            Some(id) => self.soft(scores.var(id))?.straight_through(self.hard.to_dense()),
            None => Ok(tape.constant(self.hard.to_dense())),
        }
    }
}

fn check_tau(tau: f64) -> Result<(), SelectorError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(SelectorError::BadTemperature(tau))
    }
}

/// First index of the row maximum.
fn row_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn hard_from(perturbed: &Tensor) -> SelectionMatrix {
    let (rows, cols) = perturbed.dims();
    let assignment = (0..rows).map(|i| row_argmax(perturbed.row_slice(i))).collect();
    SelectionMatrix::new(assignment, cols).expect("argmax is in range")
}

/// Stochastic draw: per row, argmax of `φ/τ + g` with `g ~ Gumbel(0, 1)`.
pub fn sample_selection<R: Rng + ?Sized>(
    phi: &Tensor,
    tau: f64,
    rng: &mut R,
) -> Result<SampledSelection, SelectorError> {
    check_tau(tau)?;
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid Gumbel parameters");
    let (rows, cols) = phi.dims();
    let noise = Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| gumbel.sample(rng)).collect());
    let perturbed = phi.scale(1.0 / tau).zip_map(&noise, |a, b| a + b);
    Ok(SampledSelection {
        hard: hard_from(&perturbed),
        scores: None,
        noise,
        tau,
    })
}

/// Noise-free draw: argmax of `φ`, ties resolved to the first index.
pub fn deterministic_selection(phi: &Tensor, tau: f64) -> Result<SampledSelection, SelectorError> {
    check_tau(tau)?;
    let (rows, cols) = phi.dims();
    Ok(SampledSelection {
        hard: hard_from(phi),
        scores: None,
        noise: Tensor::zeros(rows, cols),
        tau,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelKind {
    Learnable(ParamId),
    Total,
}

/// Score tables, temperature and schedule position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorState {
    pub scores: ParamStore,
    levels: Vec<LevelKind>,
    /// `[N_0, ..., N_K]`.
    sizes: Vec<usize>,
    tau: f64,
    step: u64,
    pub anneal: AnnealConfig,
}

impl SelectorState {
    /// `cluster_sizes` lists `N_1 .. N_K`; an empty list means no hierarchy.
    pub fn new<R: Rng + ?Sized>(
        n: usize,
        cluster_sizes: &[usize],
        anneal: AnnealConfig,
        rng: &mut R,
    ) -> Result<Self, SelectorError> {
        check_tau(anneal.tau0)?;
        let init = Normal::new(0.0, 0.1).expect("valid normal parameters");
        let mut scores = ParamStore::new();
        let mut levels = Vec::with_capacity(cluster_sizes.len());
        let mut sizes = vec![n];
        for (k, &size) in cluster_sizes.iter().enumerate() {
            if size == 0 {
                return Err(SelectorError::BadLevelSize { level: k + 1, size });
            }
            let prev = *sizes.last().unwrap();
            if size == 1 {
                levels.push(LevelKind::Total);
            } else {
                let phi = Tensor::from_rows(
                    prev,
                    size,
                    (0..prev * size).map(|_| init.sample(rng)).collect(),
                );
                levels.push(LevelKind::Learnable(scores.insert(format!("phi.{}", k + 1), phi)));
            }
            sizes.push(size);
        }
        Ok(Self {
            scores,
            levels,
            sizes,
            tau: anneal.tau0,
            step: 0,
            anneal,
        })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn levels(&self) -> &[LevelKind] {
        &self.levels
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Advances the schedule by one training step.
    pub fn anneal_step(&mut self) -> f64 {
        self.step += 1;
        self.tau = anneal_tau(&self.anneal, self.step);
        self.tau
    }

    /// Restores a schedule position, e.g. from a checkpoint.
    pub fn set_step(&mut self, step: u64) {
        self.step = step;
        self.tau = anneal_tau(&self.anneal, step);
    }

    pub fn is_learnable(&self) -> bool {
        !self.scores.is_empty()
    }

    fn draw(
        &self,
        mut level: impl FnMut(&Tensor) -> Result<SampledSelection, SelectorError>,
    ) -> Result<Vec<SampledSelection>, SelectorError> {
        self.levels
            .iter()
            .enumerate()
            .map(|(k, kind)| match *kind {
                LevelKind::Learnable(id) => {
                    let mut s = level(self.scores.get(id))?;
                    s.scores = Some(id);
                    Ok(s)
                }
                LevelKind::Total => Ok(SampledSelection {
                    hard: SelectionMatrix::total(self.sizes[k]),
                    scores: None,
                    noise: Tensor::zeros(self.sizes[k], 1),
                    tau: self.tau,
                }),
            })
            .collect()
    }

    /// Fresh Gumbel draw for every learnable level.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<SampledSelection>, SelectorError> {
        let tau = self.tau;
        self.draw(|phi| sample_selection(phi, tau, rng))
    }

    /// Argmax of the scores at every level.
    pub fn deterministic(&self) -> Result<Vec<SampledSelection>, SelectorError> {
        let tau = self.tau;
        self.draw(|phi| deterministic_selection(phi, tau))
    }

    pub fn argmax_selections(&self) -> Vec<SelectionMatrix> {
        self.deterministic()
            .expect("temperature is validated on construction")
            .into_iter()
            .map(|s| s.hard)
            .collect()
    }
}

/// Value of the min-cut regulariser and its parts.
#[derive(Debug, Clone, Copy)]
pub struct MincutTerms<'t> {
    pub loss: Var<'t>,
    pub cut: Var<'t>,
    pub ortho: Var<'t>,
    /// The graph had no edges, so the cut term was set to zero.
    pub zero_degree: bool,
}

/// `-Tr(SᵀÃS)/Tr(SᵀD̃S) + ‖SᵀS/‖SᵀS‖_F - I/√K‖_F`.
///
/// `A` is symmetrised as `(A + Aᵀ)/2` before normalisation so the cut ratio
/// stays in `[-1, 0]` on directed graphs.
pub fn mincut_loss<'t>(s: Var<'t>, a: &Tensor) -> Result<MincutTerms<'t>, NdError> {
    let tape = s.tape();
    let (n, k) = s.dims();
    if a.dims() != (n, n) {
        return Err(NdError::ShapeMismatch {
            op: "mincut_loss",
            lhs: vec![n, k],
            rhs: a.shape().to_vec(),
        });
    }
    let sym = a.zip_map(&a.transpose(), |x, y| 0.5 * (x + y));
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = sym.row_slice(i).iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut a_norm = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a_norm.set(i, j, (inv_sqrt[i] * inv_sqrt[j]) * sym.get(i, j));
        }
    }
    let degree: Vec<f64> = (0..n).map(|i| a_norm.row_slice(i).iter().sum()).collect();
    let zero_degree = degree.iter().all(|&d| d == 0.0);

    let st = s.transpose()?;
    let cut = if zero_degree {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let num = st.matmul(tape.constant(a_norm).matmul(s)?)?.trace()?;
        let den = st.matmul(s.scale_rows(Rc::new(degree))?)?.trace()?;
        num.div(den)?.neg()?
    };

    let gram = st.matmul(s)?;
    let norm = gram.norm()?;
    let spread = tape
        .constant(Tensor::filled(k, 1, 1.0))
        .matmul(norm)?
        .matmul(tape.constant(Tensor::filled(1, k, 1.0)))?;
    let target = Tensor::eye(k).scale(1.0 / (k as f64).sqrt());
    let ortho = gram.div(spread)?.add_const(&target.scale(-1.0))?.norm()?;
    Ok(MincutTerms {
        loss: cut.add(ortho)?,
        cut,
        ortho,
        zero_degree,
    })
}

/// `weight * Σ_k mincut(softmax(Φ^(k)), A^(k-1))` over learnable levels.
///
/// `adjacencies[k]` is the adjacency of level `k` under the current hard
/// selections. Returns the loss and the number of zero-degree levels.
pub fn selector_loss<'t>(
    tape: &'t Tape,
    scores: &Bound<'t>,
    state: &SelectorState,
    adjacencies: &[&Tensor],
    weight: f64,
) -> Result<(Var<'t>, usize), SelectorError> {
    if adjacencies.len() < state.depth() {
        return Err(SelectorError::LevelCount {
            expected: state.depth(),
            actual: adjacencies.len(),
        });
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    let mut degenerate = 0;
    if weight == 0.0 {
        return Ok((total, 0));
    }
    for (k, kind) in state.levels().iter().enumerate() {
        if let LevelKind::Learnable(id) = *kind {
            let soft = scores.var(id).softmax()?;
            let terms = mincut_loss(soft, adjacencies[k])?;
            degenerate += usize::from(terms.zero_degree);
            total = total.add(terms.loss)?;
        }
    }
    Ok((total.scale(weight)?, degenerate))
}

/// Plain `softmax(Φ)` per row, for reporting.
pub fn soft_assignment(phi: &Tensor) -> Tensor {
    softmax_rows(phi)
}
