//! The training loop and deterministic evaluation.

use std::fmt;
use std::ops::Range;
use std::rc::Rc;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
use super::config::RunConfig;
use super::data::{chrono_split, usable_window_starts, DatasetBundle};
use super::metrics::{ari, MetricsAccumulator, MetricsReport};
use super::standardize::{LevelStats, Standardizer};
use super::PipelineError;
use crate::forecaster::{stack_levels, LevelWindow, Model};
use crate::graph::PreparedGraph;
use crate::hierarchy::{level_offsets, Hierarchy, SelectionMatrix};
use crate::ndiff::{Adam, AdamConfig, Bound, NdError, Tape, Tensor, Var};
use crate::reconciler::{composite_loss, Projector, ReconcileMode};
use crate::selector::{selector_loss, SampledSelection, SelectorState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }
}

impl FromStr for Split {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(PipelineError::Config(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean forecasting loss over the epoch's batches.
    pub train_loss: f64,
    /// Mean weighted min-cut term over the epoch's batches.
    pub mincut_loss: f64,
    /// Bottom-level validation MAE in raw units.
    pub val_mae: f64,
    pub lr: f64,
    /// Temperature at the start of the epoch.
    pub tau: f64,
    /// Steps in which some level had no edge weight left.
    pub degenerate_steps: usize,
    /// Empty clusters under the argmax selections at the end of the epoch.
    pub empty_clusters: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best validated state.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Loss values of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub forecast: f64,
    pub mincut: f64,
    pub degenerate: bool,
}

/// Everything derived from one set of hard selections.
struct Structure {
    key: Vec<Vec<usize>>,
    hierarchy: Hierarchy,
    q: Tensor,
    projector: Option<Projector>,
    graphs: Vec<Option<PreparedGraph>>,
    stats: Vec<LevelStats>,
}

/// Window data of a batch at the bottom level, scaled units.
struct Batch {
    size: usize,
    x: Tensor,
    u: Option<Tensor>,
    y: Tensor,
    /// `(B*N) x H`, row-major.
    observed: Vec<bool>,
}

struct Forward<'t> {
    y_hat: Var<'t>,
    y_bar: Option<Var<'t>>,
    y: Var<'t>,
    mask: Rc<Tensor>,
}

/// Owns the model, selector and optimizers for one dataset.
pub struct Trainer<'d> {
    data: &'d DatasetBundle,
    config: RunConfig,
    dataset_path: String,
    splits: [Range<usize>; 3],
    standardizer: Standardizer,
    scaled: Tensor,
    covariates: Option<Tensor>,
    base_adjacency: Tensor,
    base_graph: PreparedGraph,
    pub model: Model,
    pub selector: SelectorState,
    adam_model: Adam,
    adam_selector: Adam,
    rng: ChaCha8Rng,
    train_starts: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    cache: Option<Structure>,
    epoch: usize,
}

fn split_ratios(config: &RunConfig, data: &DatasetBundle) -> [f64; 3] {
    data.meta.split.unwrap_or(config.data.split)
}

impl<'d> Trainer<'d> {
    /// Fresh model and selector initialised from `config.train.seed`.
    pub fn new(data: &'d DatasetBundle, config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let (w, h) = (config.model.window, config.model.horizon);
        let splits = chrono_split(data.len(), split_ratios(&config, data), w, h)?;
        let standardizer = Standardizer::fit(data, &splits[0])?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let levels = config.hierarchy.cluster_sizes.len() + 1;
        let model = Model::new(config.model.clone(), data.nodes(), data.covariate_dim(), levels, &mut rng)?;
        let selector = SelectorState::new(data.nodes(), &config.hierarchy.cluster_sizes, config.selector, &mut rng)?;
        let adam = AdamConfig {
            lr: config.train.lr,
            ..AdamConfig::default()
        };
        let adam_model = Adam::new(adam, &model.params);
        let adam_selector = Adam::new(adam, &selector.scores);
        Self::assemble(data, config, splits, standardizer, model, selector, adam_model, adam_selector, rng, 0)
    }

    /// Restores a checkpoint; statistics come from the checkpoint, not the data.
    pub fn from_checkpoint(data: &'d DatasetBundle, checkpoint: Checkpoint) -> Result<Self, PipelineError> {
        checkpoint.check_compatible(data)?;
        let config = checkpoint.config;
        let (w, h) = (config.model.window, config.model.horizon);
        let splits = chrono_split(data.len(), split_ratios(&config, data), w, h)?;
        let rng = ChaCha8Rng::seed_from_u64(config.train.seed.wrapping_add(checkpoint.epoch as u64));
        let mut t = Self::assemble(
            data,
            config,
            splits,
            checkpoint.standardizer,
            checkpoint.model,
            checkpoint.selector,
            checkpoint.adam_model,
            checkpoint.adam_selector,
            rng,
            checkpoint.epoch,
        )?;
        t.dataset_path = checkpoint.dataset;
        Ok(t)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        data: &'d DatasetBundle,
        config: RunConfig,
        splits: [Range<usize>; 3],
        standardizer: Standardizer,
        model: Model,
        selector: SelectorState,
        adam_model: Adam,
        adam_selector: Adam,
        rng: ChaCha8Rng,
        epoch: usize,
    ) -> Result<Self, PipelineError> {
        let (w, h) = (config.model.window, config.model.horizon);
        let train_starts = usable_window_starts(data, &splits[0], w, h);
        if train_starts.is_empty() {
            return Err(PipelineError::Data("training split has no usable window".into()));
        }
        let base_adjacency = data.graph.adjacency();
        let base_graph = PreparedGraph::new(&base_adjacency, config.model.diffusion_order)?;
        let scaled = standardizer.scaled_values(data);
        let covariates = standardizer.standard_covariates(data);
        Ok(Self {
            data,
            dataset_path: config.data.path.clone(),
            config,
            splits,
            standardizer,
            scaled,
            covariates,
            base_adjacency,
            base_graph,
            model,
            selector,
            adam_model,
            adam_selector,
            rng,
            order: Vec::new(),
            cursor: 0,
            train_starts,
            cache: None,
            epoch,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn splits(&self) -> &[Range<usize>; 3] {
        &self.splits
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn train_starts(&self) -> &[usize] {
        &self.train_starts
    }

    pub fn set_dataset_path(&mut self, path: impl Into<String>) {
        self.dataset_path = path.into();
    }

    fn structure(&mut self, selections: Vec<SelectionMatrix>) -> Result<(), PipelineError> {
        let key: Vec<Vec<usize>> = selections.iter().map(|s| s.assignment().to_vec()).collect();
        if self.cache.as_ref().is_some_and(|c| c.key == key) {
            return Ok(());
        }
        let hierarchy = Hierarchy::new(self.base_adjacency.clone(), selections)?;
        let q = hierarchy.constraint_matrix();
        let projector = match self.config.loss.mode.resolve(hierarchy.total_size()) {
            ReconcileMode::ResidualPenalty => None,
            _ => Some(Projector::new(&q)?),
        };
        let mut graphs = Vec::with_capacity(hierarchy.level_sizes().len());
        for k in 0..hierarchy.level_sizes().len() {
            graphs.push(if !self.model.has_intra(k) {
                None
            } else if k == 0 {
                Some(self.base_graph.clone())
            } else {
                Some(PreparedGraph::new(hierarchy.adjacency(k), self.config.model.diffusion_order)?)
            });
        }
        let stats = self.standardizer.level_stats(hierarchy.selections());
        self.cache = Some(Structure {
            key,
            hierarchy,
            q,
            projector,
            graphs,
            stats,
        });
        Ok(())
    }

    fn batch(&self, starts: &[usize]) -> Batch {
        let (n, du) = (self.data.nodes(), self.data.covariate_dim());
        let (w, h) = (self.config.model.window, self.config.model.horizon);
        let b = starts.len();
        let mut x = Tensor::zeros(b * n, w);
        let mut y = Tensor::zeros(b * n, h);
        let mut observed = vec![false; b * n * h];
        let mut u = self.covariates.as_ref().map(|_| Tensor::zeros(b * n, w * du));
        for (bi, &t) in starts.iter().enumerate() {
            for i in 0..n {
                let row = bi * n + i;
                for s in 0..w {
                    x.set(row, s, self.scaled.get(t - w + s, i));
                }
                for s in 0..h {
                    y.set(row, s, self.scaled.get(t + s, i));
                    observed[row * h + s] = self.data.observed(t + s, i);
                }
                if let (Some(u), Some(cov)) = (u.as_mut(), self.covariates.as_ref()) {
                    for s in 0..w {
                        for f in 0..du {
                            u.set(row, s * du + f, cov.get(t - w + s, i * du + f));
                        }
                    }
                }
            }
        }
        Batch {
            size: b,
            x,
            u,
            y,
            observed,
        }
    }

    /// Stacked forecasts, targets and mask for a batch. `selections[k]` is
    /// `S^(k+1)` on the tape; the hard structure must already be cached.
    fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &Bound<'t>,
        selections: &[Var<'t>],
        batch: &Batch,
    ) -> Result<Forward<'t>, PipelineError> {
        let st = self.cache.as_ref().expect("structure built before forward");
        let hier = &st.hierarchy;
        let sizes = hier.level_sizes();
        let levels = sizes.len();
        let (w, h) = (self.config.model.window, self.config.model.horizon);
        let bsz = batch.size;

        let mut xs = vec![tape.constant(batch.x.clone())];
        let mut ys = vec![tape.constant(batch.y.clone())];
        let mut us = vec![batch.u.clone()];
        for (k, s) in selections.iter().enumerate() {
            let s_t = s.transpose()?;
            xs.push(s_t.block_matmul(xs[k])?);
            ys.push(s_t.block_matmul(ys[k])?);
            let next = us[k].as_ref().map(|u| {
                Standardizer::aggregate_covariates(
                    u,
                    &hier.selections()[k],
                    bsz,
                    self.config.data.covariate_aggregation,
                )
            });
            us.push(next);
        }

        // Level means follow the selections on the tape so that moving a node
        // between clusters shifts forecast and target alike.
        let mut means = vec![tape.constant(Tensor::column(&st.stats[0].mean))];
        for (k, s) in selections.iter().enumerate() {
            means.push(s.transpose()?.matmul(means[k])?);
        }
        let spread = |mean: Var<'t>, cols: usize| -> Result<Var<'t>, NdError> {
            mean.tile_rows(bsz)?.matmul(tape.constant(Tensor::filled(1, cols, 1.0)))
        };
        let mut inputs = Vec::with_capacity(levels);
        for k in 0..levels {
            let inv_std: Vec<f64> = st.stats[k].std.iter().map(|s| 1.0 / s).collect();
            let y = xs[k].sub(spread(means[k], w)?)?.scale_rows(tile(&inv_std, bsz))?;
            inputs.push(LevelWindow {
                y,
                u: us[k].as_ref().map(|u| tape.constant(u.clone())),
            });
        }
        let graphs: Vec<Option<&PreparedGraph>> = st.graphs.iter().map(Option::as_ref).collect();
        let outputs = self.model.forward(params, &inputs, selections, &graphs)?;
        let mut rescaled = Vec::with_capacity(levels);
        for (k, out) in outputs.iter().enumerate() {
            rescaled.push(out.scale_rows(tile(&st.stats[k].std, bsz))?.add(spread(means[k], h)?)?);
        }
        let y_hat = stack_levels(&rescaled, sizes)?;
        let y = stack_levels(&ys, sizes)?;
        let y_bar = match &st.projector {
            Some(p) => Some(p.apply_var(y_hat)?),
            None => None,
        };
        Ok(Forward {
            y_hat,
            y_bar,
            y,
            mask: Rc::new(stack_mask(hier, &batch.observed, bsz, h)),
        })
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let b = self.config.train.batch_size;
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.cursor >= self.order.len() {
                self.order = self.train_starts.clone();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One optimisation step on the windows starting at `starts`.
    pub fn step_on(&mut self, starts: &[usize]) -> Result<StepStats, PipelineError> {
        let samples: Vec<SampledSelection> = self.selector.sample(&mut self.rng)?;
        self.structure(samples.iter().map(|s| s.hard.clone()).collect())?;
        let batch = self.batch(starts);
        let tape = Tape::new();
        let pm = self.model.params.bind(&tape);
        let ps = self.selector.scores.bind(&tape);
        let sel: Vec<Var> = samples
            .iter()
            .map(|s| s.straight_through(&tape, &ps))
            .collect::<Result<_, NdError>>()?;
        let fwd = self.forward(&tape, &pm, &sel, &batch)?;
        let st = self.cache.as_ref().expect("structure cached");
        let forecast = composite_loss(fwd.y_hat, fwd.y_bar, fwd.y, &st.q, &self.config.loss, Some(&fwd.mask))?;
        let adjacencies: Vec<&Tensor> = (0..self.selector.depth()).map(|k| st.hierarchy.adjacency(k)).collect();
        let (mincut, degenerate) =
            selector_loss(&tape, &ps, &self.selector, &adjacencies, self.config.loss.mincut_weight)?;
        let total = forecast.add(mincut)?;
        let value = total.value().item();
        if !value.is_finite() {
            return Err(NdError::NonFinite { op: "training loss" }.into());
        }
        let grads = tape.backward(total)?;
        let gm = pm.gradients(&grads);
        let gs = ps.gradients(&grads);
        for (store, g) in [(&self.model.params, &gm), (&self.selector.scores, &gs)] {
            if let Some(i) = g.iter().position(|t| !t.is_finite()) {
                return Err(NdError::NonFiniteGradient {
                    name: store.name(crate::ndiff::ParamId(i)).to_string(),
                }
                .into());
            }
        }
        self.adam_model.step(&mut self.model.params, &gm)?;
        self.adam_selector.step(&mut self.selector.scores, &gs)?;
        self.selector.anneal_step();
        Ok(StepStats {
            forecast: forecast.value().item(),
            mincut: mincut.value().item(),
            degenerate: degenerate > 0,
        })
    }

    fn set_lr(&mut self, lr: f64) {
        self.adam_model.set_lr(lr);
        self.adam_selector.set_lr(lr);
    }

    /// Deterministic metrics on one split, raw units.
    pub fn evaluate(&mut self, split: Split) -> Result<MetricsReport, PipelineError> {
        let range = self.splits[split.index()].clone();
        let (w, h) = (self.config.model.window, self.config.model.horizon);
        let starts = usable_window_starts(self.data, &range, w, h);
        if starts.is_empty() {
            return Err(PipelineError::Data(format!("{split} split has no usable window")));
        }
        self.evaluate_starts(&starts)
    }

    fn evaluate_starts(&mut self, starts: &[usize]) -> Result<MetricsReport, PipelineError> {
        let selections = self.selector.argmax_selections();
        self.structure(selections.clone())?;
        let h = self.config.model.horizon;
        let scale = self.standardizer.scale;
        let (n, levels) = {
            let hier = &self.cache.as_ref().expect("cached").hierarchy;
            (hier.bottom_size(), hier.level_sizes().len())
        };
        let mut acc = MetricsAccumulator::new(h, levels);
        for chunk in starts.chunks(self.config.train.batch_size.max(1)) {
            let batch = self.batch(chunk);
            let tape = Tape::new();
            let pm = self.model.params.bind_frozen(&tape);
            let sel: Vec<Var> = selections.iter().map(|s| tape.constant(s.to_dense())).collect();
            let fwd = self.forward(&tape, &pm, &sel, &batch)?;
            let st = self.cache.as_ref().expect("cached");
            let pred = fwd.y_bar.unwrap_or(fwd.y_hat).value().scale(scale);
            let target = fwd.y.value().scale(scale);
            let m = st.hierarchy.total_size();
            let offsets = level_offsets(st.hierarchy.level_sizes());
            let block = |t: &Tensor, b: usize, r: &Range<usize>| -> Vec<f64> {
                t.data()[(b * m + r.start) * h..(b * m + r.end) * h].to_vec()
            };
            for b in 0..batch.size {
                let mask: Vec<bool> = fwd.mask.data()[b * m * h..(b + 1) * m * h].iter().map(|&v| v > 0.0).collect();
                for (k, r) in offsets.iter().enumerate() {
                    let mk = &mask[r.start * h..r.end * h];
                    acc.add_level(k, &block(&pred, b, r), &block(&target, b, r), mk);
                }
                let bottom = &offsets[0];
                acc.add_bottom(
                    &block(&pred, b, bottom),
                    &block(&target, b, bottom),
                    &batch.observed[b * n * h..(b + 1) * n * h],
                );
                let sample = Tensor::from_rows(m, h, block(&pred, b, &(0..m)));
                acc.add_residual(st.q.matmul(&sample).frobenius());
            }
        }
        let ari_value = match (&self.data.true_clusters, selections.first()) {
            (Some(labels), Some(first)) => Some(ari(first.assignment(), labels)),
            _ => None,
        };
        acc.finish(&self.config.eval.horizons, ari_value)
    }

    /// Empty clusters under the current argmax selections.
    pub fn empty_clusters(&self) -> usize {
        self.selector
            .argmax_selections()
            .iter()
            .map(SelectionMatrix::empty_clusters)
            .sum()
    }

    pub fn checkpoint(&self, best_epoch: Option<usize>, best_val_mae: Option<f64>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            model: self.model.clone(),
            selector: self.selector.clone(),
            adam_model: self.adam_model.clone(),
            adam_selector: self.adam_selector.clone(),
            standardizer: self.standardizer.clone(),
            epoch: self.epoch,
            best_epoch,
            best_val_mae,
            dataset: self.dataset_path.clone(),
        }
    }

    /// Runs epochs until `max_epochs` or early stopping; keeps the parameters
    /// with the lowest validation MAE.
    pub fn run(mut self) -> Result<TrainOutcome, PipelineError> {
        let (w, h) = (self.config.model.window, self.config.model.horizon);
        let val_starts = usable_window_starts(self.data, &self.splits[1], w, h);
        if val_starts.is_empty() {
            return Err(PipelineError::Data("validation split has no usable window".into()));
        }
        let tc = self.config.train.clone();
        let mut log = Vec::new();
        let mut best: Option<(usize, f64, Model, SelectorState)> = None;
        let mut last_good = self.checkpoint(None, None);
        let mut since_best = 0;
        let mut stopped_early = false;
        while self.epoch < tc.max_epochs {
            let epoch = self.epoch;
            let lr = tc.lr_at(epoch);
            self.set_lr(lr);
            let tau = self.selector.tau();
            let (mut forecast, mut mincut, mut degenerate) = (0.0, 0.0, 0);
            for _ in 0..tc.batches_per_epoch {
                let starts = self.next_batch();
                let stats = match self.step_on(&starts) {
                    Ok(s) => s,
                    Err(e) if e.is_non_finite() => {
                        return Err(PipelineError::Diverged {
                            epoch,
                            step: self.selector.step(),
                            reason: e.to_string(),
                            checkpoint: Box::new(last_good),
                        })
                    }
                    Err(e) => return Err(e),
                };
                forecast += stats.forecast;
                mincut += stats.mincut;
                degenerate += usize::from(stats.degenerate);
            }
            let val = self.evaluate_starts(&val_starts)?;
            if !val.mae.is_finite() {
                return Err(PipelineError::Diverged {
                    epoch,
                    step: self.selector.step(),
                    reason: "validation MAE is not finite".into(),
                    checkpoint: Box::new(last_good),
                });
            }
            let batches = tc.batches_per_epoch as f64;
            log.push(EpochRecord {
                epoch,
                train_loss: forecast / batches,
                mincut_loss: mincut / batches,
                val_mae: val.mae,
                lr,
                tau,
                degenerate_steps: degenerate,
                empty_clusters: self.empty_clusters(),
            });
            self.epoch += 1;
            if best.as_ref().is_none_or(|b| val.mae < b.1) {
                best = Some((epoch, val.mae, self.model.clone(), self.selector.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            last_good = self.checkpoint(best.as_ref().map(|b| b.0), best.as_ref().map(|b| b.1));
            if since_best >= tc.patience {
                stopped_early = true;
                break;
            }
        }
        let (best_epoch, best_mae) = match best {
            Some((epoch, mae, model, selector)) => {
                self.model = model;
                self.selector = selector;
                (Some(epoch), Some(mae))
            }
            None => (None, None),
        };
        Ok(TrainOutcome {
            checkpoint: self.checkpoint(best_epoch, best_mae),
            log,
            stopped_early,
        })
    }
}

/// Trains a fresh model on `data`.
pub fn train(data: &DatasetBundle, config: RunConfig) -> Result<TrainOutcome, PipelineError> {
    Trainer::new(data, config)?.run()
}

/// Deterministic metrics of a checkpoint on one split of `data`.
pub fn evaluate(checkpoint: &Checkpoint, data: &DatasetBundle, split: Split) -> Result<MetricsReport, PipelineError> {
    Trainer::from_checkpoint(data, checkpoint.clone())?.evaluate(split)
}

/// `v` repeated `reps` times.
fn tile(v: &[f64], reps: usize) -> Rc<Vec<f64>> {
    let mut out = Vec::with_capacity(v.len() * reps);
    for _ in 0..reps {
        out.extend_from_slice(v);
    }
    Rc::new(out)
}

/// Stacked `(B*M) x H` weights: an aggregate entry counts only when every
/// bottom member is observed.
fn stack_mask(hier: &Hierarchy, observed: &[bool], batch: usize, h: usize) -> Tensor {
    let sizes = hier.level_sizes();
    let n = sizes[0];
    let m: usize = sizes.iter().sum();
    let offsets = level_offsets(sizes);
    let mut out = Tensor::filled(batch * m, h, 1.0);
    for (k, range) in offsets.iter().enumerate() {
        let map = hier.bottom_to_level(k);
        for b in 0..batch {
            for (i, &c) in map.iter().enumerate() {
                for s in 0..h {
                    if !observed[(b * n + i) * h + s] {
                        out.set(b * m + range.start + c, s, 0.0);
                    }
                }
            }
        }
    }
    out
}
