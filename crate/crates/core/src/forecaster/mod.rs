//! Hierarchical time-then-space forecaster.
//!
//! Every level of the hierarchy is encoded node by node with a GRU, then
//! `L` layers mix information within a level (message passing) and across
//! adjacent levels (reduce from below, lift from above). A per-level MLP
//! readout maps each node to `H` future values.
//!
//! Batches use the `(B*N_k) x d` layout: rows `b*N_k .. (b+1)*N_k` belong to
//! sample `b`. Selection matrices are passed as tape variables so that the
//! straight-through gradient reaches the score tables.

mod gru;
mod loss;

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, MpParams, PreparedGraph, Scheme};
use crate::hierarchy::{level_offsets, LevelStack};
use crate::ndiff::{concat_cols, Bound, NdError, ParamId, ParamStore, Tensor, Var};
use crate::nn::{glorot, Linear};

pub use gru::GruParams;
pub use loss::forecast_loss;

#[derive(Debug, Error, PartialEq)]
pub enum ForecastError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("expected {expected} levels, got {actual}")]
    LevelCount { expected: usize, actual: usize },
    #[error("level {level}: window has {actual} steps, expected {expected}")]
    Window {
        level: usize,
        expected: usize,
        actual: usize,
    },
    #[error("level {level}: {rows} input rows is not a multiple of {nodes} nodes")]
    Batch {
        level: usize,
        rows: usize,
        nodes: usize,
    },
    #[error("level {level}, {stage}: {source}")]
    At {
        level: usize,
        stage: String,
        source: NdError,
    },
    #[error("level {level}: message passing enabled but no graph given")]
    MissingGraph { level: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn at(level: usize, stage: impl Into<String>) -> impl FnOnce(NdError) -> ForecastError {
    let stage = stage.into();
    move |source| ForecastError::At {
        level,
        stage,
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_h: usize,
    pub d_e: usize,
    /// Message-passing layers `L`.
    pub layers: usize,
    pub scheme: Scheme,
    pub diffusion_order: usize,
    pub share_encoders: bool,
    pub window: usize,
    pub horizon: usize,
    /// Run message passing at level 0 only; upper levels pass through.
    pub intra_level_base_only: bool,
    /// Add the input back after each inter-level update.
    pub mu_residual: bool,
    /// Hidden dense layers in the readout.
    pub readout_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_h: 32,
            d_e: 16,
            layers: 2,
            scheme: Scheme::Gconv,
            diffusion_order: 2,
            share_encoders: false,
            window: 12,
            horizon: 3,
            intra_level_base_only: true,
            mu_residual: false,
            readout_layers: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ForecastError> {
        let checks = [
            ("d_h", self.d_h),
            ("d_e", self.d_e),
            ("layers", self.layers),
            ("window", self.window),
            ("horizon", self.horizon),
            ("readout_layers", self.readout_layers),
            ("diffusion_order", self.diffusion_order),
        ];
        for (name, v) in checks {
            if v == 0 {
                return Err(ForecastError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Inter-level update `ELU(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuParams {
    pub hidden: Linear,
    pub out: Linear,
}

impl MuParams {
    pub fn apply<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, NdError> {
        self.out.apply(p, self.hidden.apply(p, x)?.elu()?)
    }
}

/// `ELU([h | v] W_fc + b_fc) ... W_h + b_h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutParams {
    pub hidden: Vec<Linear>,
    pub out: Linear,
}

impl ReadoutParams {
    pub fn apply<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, NdError> {
        let mut h = x;
        for lin in &self.hidden {
            h = lin.apply(p, h)?.elu()?;
        }
        self.out.apply(p, h)
    }
}

/// Inputs of one level for a batch.
#[derive(Debug, Clone, Copy)]
pub struct LevelWindow<'t> {
    /// `(B*N_k) x W` target history.
    pub y: Var<'t>,
    /// `(B*N_k) x (W*d_u)` covariates, step-major.
    pub u: Option<Var<'t>>,
}

/// One layer of intra- and inter-level propagation.
///
/// `s_t[k-1]` is `S^(k)ᵀ` and `s[k-1]` is `S^(k)`, both as tape variables.
/// Level `k` receives `mu(k, [Z_k | S^(k)ᵀ Z_{k-1} | S^(k+1) Z_{k+1}])`
/// with zeros standing in for the missing neighbours at the bottom and top.
/// With a single level, `mu` is skipped and `Z_0` is returned.
pub fn hier_propagate<'t>(
    h: &[Var<'t>],
    s: &[Var<'t>],
    s_t: &[Var<'t>],
    mut gnn: impl FnMut(usize, Var<'t>) -> Result<Var<'t>, ForecastError>,
    mut mu: impl FnMut(usize, Var<'t>) -> Result<Var<'t>, ForecastError>,
) -> Result<Vec<Var<'t>>, ForecastError> {
    let levels = h.len();
    if s.len() + 1 != levels || s_t.len() != s.len() {
        return Err(ForecastError::LevelCount {
            expected: s.len() + 1,
            actual: levels,
        });
    }
    let z: Vec<Var<'t>> = h
        .iter()
        .enumerate()
        .map(|(k, &hk)| gnn(k, hk))
        .collect::<Result<_, _>>()?;
    if levels == 1 {
        return Ok(z);
    }
    let mut out = Vec::with_capacity(levels);
    for k in 0..levels {
        let tape = z[k].tape();
        let (rows, d) = z[k].dims();
        let zeros = || tape.constant(Tensor::zeros(rows, d));
        let below = if k > 0 {
            s_t[k - 1].block_matmul(z[k - 1]).map_err(at(k, "reduce"))?
        } else {
            zeros()
        };
        let above = if k + 1 < levels {
            s[k].block_matmul(z[k + 1]).map_err(at(k, "lift"))?
        } else {
            zeros()
        };
        let joined = concat_cols(&[z[k], below, above]).map_err(at(k, "concat"))?;
        out.push(mu(k, joined)?);
    }
    Ok(out)
}

/// Places per-level `(B*N_k) x H` blocks into the `(B*M) x H` top-first
/// stacked layout.
pub fn stack_levels<'t>(outputs: &[Var<'t>], sizes: &[usize]) -> Result<Var<'t>, NdError> {
    let first = outputs.first().ok_or(NdError::Empty { op: "stack_levels" })?;
    let tape = first.tape();
    let m: usize = sizes.iter().sum();
    let offsets = level_offsets(sizes);
    let mut total: Option<Var<'t>> = None;
    for (k, out) in outputs.iter().enumerate() {
        let mut embed = Tensor::zeros(m, sizes[k]);
        for (j, row) in offsets[k].clone().enumerate() {
            embed.set(row, j, 1.0);
        }
        let placed = tape.constant(embed).block_matmul(*out)?;
        total = Some(match total {
            Some(t) => t.add(placed)?,
            None => placed,
        });
    }
    Ok(total.expect("at least one level"))
}

/// Raw, reconciled and target stacks for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastBundle {
    pub raw: LevelStack,
    pub reconciled: Option<LevelStack>,
    pub targets: LevelStack,
}

/// The hierarchical forecaster. Parameters live in `params`; the forward
/// pass reads them through a [`Bound`] so callers decide what is trainable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub nodes: usize,
    pub covariates: usize,
    pub levels: usize,
    pub embeddings: ParamId,
    pub encoders: Vec<GruParams>,
    /// `[layer][level]`; `None` where intra-level propagation is off.
    pub mp: Vec<Vec<Option<MpParams>>>,
    /// `[layer][level]`; empty for a single-level model.
    pub mu: Vec<Vec<MuParams>>,
    pub readout: Vec<ReadoutParams>,
}

impl Model {
    /// `levels` is `K + 1`; `covariates` is `d_u`.
    pub fn new(
        config: ModelConfig,
        nodes: usize,
        covariates: usize,
        levels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ForecastError> {
        config.validate()?;
        if levels == 0 || nodes == 0 {
            return Err(ForecastError::Config("need at least one node and level".into()));
        }
        let (d_h, d_e) = (config.d_h, config.d_e);
        let mut params = ParamStore::new();
        let embeddings = params.insert("embeddings", glorot(rng, nodes, d_e));
        let n_enc = if config.share_encoders { 1 } else { levels };
        let encoders = (0..n_enc)
            .map(|k| GruParams::new(&mut params, &format!("enc{k}"), 1 + covariates, d_e, d_h, rng))
            .collect();
        let mut mp = Vec::with_capacity(config.layers);
        let mut mu = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            mp.push(
                (0..levels)
                    .map(|k| {
                        (k == 0 || !config.intra_level_base_only).then(|| {
                            MpParams::new(
                                &mut params,
                                &format!("mp{l}.{k}"),
                                config.scheme,
                                d_h,
                                config.diffusion_order,
                                rng,
                            )
                        })
                    })
                    .collect(),
            );
            if levels > 1 {
                mu.push(
                    (0..levels)
                        .map(|k| MuParams {
                            hidden: Linear::new(&mut params, &format!("mu{l}.{k}.hidden"), 3 * d_h, d_h, true, rng),
                            out: Linear::new(&mut params, &format!("mu{l}.{k}.out"), d_h, d_h, true, rng),
                        })
                        .collect(),
                );
            }
        }
        let readout = (0..levels)
            .map(|k| {
                let hidden = (0..config.readout_layers)
                    .map(|i| {
                        let d_in = if i == 0 { d_h + d_e } else { d_h };
                        Linear::new(&mut params, &format!("readout{k}.fc{i}"), d_in, d_h, true, rng)
                    })
                    .collect();
                let out = Linear::new(&mut params, &format!("readout{k}.out"), d_h, config.horizon, true, rng);
                ReadoutParams { hidden, out }
            })
            .collect();
        Ok(Self {
            config,
            params,
            nodes,
            covariates,
            levels,
            embeddings,
            encoders,
            mp,
            mu,
            readout,
        })
    }

    fn encoder(&self, level: usize) -> &GruParams {
        &self.encoders[if self.config.share_encoders { 0 } else { level }]
    }

    /// Whether level `k` runs message passing.
    pub fn has_intra(&self, level: usize) -> bool {
        level == 0 || !self.config.intra_level_base_only
    }

    /// Per-level embeddings `V^(k) = S^(k)ᵀ V^(k-1)`, unbatched.
    pub fn level_embeddings<'t>(
        &self,
        p: &Bound<'t>,
        s_t: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>, ForecastError> {
        let mut out = vec![p.var(self.embeddings)];
        for (k, st) in s_t.iter().enumerate() {
            let v = st.matmul(out[k]).map_err(at(k + 1, "embedding reduce"))?;
            out.push(v);
        }
        Ok(out)
    }

    /// Standardised forecasts per level, each `(B*N_k) x H`.
    ///
    /// `selections[k-1]` is the `N_{k-1} x N_k` matrix `S^(k)`;
    /// `graphs[k]` is needed wherever message passing runs.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        inputs: &[LevelWindow<'t>],
        selections: &[Var<'t>],
        graphs: &[Option<&PreparedGraph>],
    ) -> Result<Vec<Var<'t>>, ForecastError> {
        if inputs.len() != self.levels || selections.len() + 1 != self.levels {
            return Err(ForecastError::LevelCount {
                expected: self.levels,
                actual: inputs.len().min(selections.len() + 1),
            });
        }
        let rows0 = inputs[0].y.dims().0;
        if rows0 % self.nodes != 0 {
            return Err(ForecastError::Batch {
                level: 0,
                rows: rows0,
                nodes: self.nodes,
            });
        }
        let batch = rows0 / self.nodes;
        let s_t: Vec<Var<'t>> = selections
            .iter()
            .enumerate()
            .map(|(k, s)| s.transpose().map_err(at(k + 1, "selection")))
            .collect::<Result<_, _>>()?;
        let emb = self.level_embeddings(p, &s_t)?;
        let mut emb_tiled = Vec::with_capacity(self.levels);
        let mut h = Vec::with_capacity(self.levels);
        for (k, input) in inputs.iter().enumerate() {
            let n_k = emb[k].dims().0;
            let (rows, w) = input.y.dims();
            if rows != batch * n_k {
                return Err(ForecastError::Batch {
                    level: k,
                    rows,
                    nodes: n_k,
                });
            }
            if w != self.config.window {
                return Err(ForecastError::Window {
                    level: k,
                    expected: self.config.window,
                    actual: w,
                });
            }
            let v = emb[k].tile_rows(batch).map_err(at(k, "embedding tile"))?;
            let steps = gru::step_inputs(input.y, input.u.map(|u| (u, self.covariates)))
                .map_err(at(k, "encoder input"))?;
            h.push(
                self.encoder(k)
                    .encode(p, &steps, Some(v))
                    .map_err(at(k, "encoder"))?,
            );
            emb_tiled.push(v);
        }
        for l in 0..self.config.layers {
            h = hier_propagate(
                &h,
                selections,
                &s_t,
                |k, hk| match &self.mp[l][k] {
                    Some(mp) => {
                        let g = graphs
                            .get(k)
                            .copied()
                            .flatten()
                            .ok_or(ForecastError::MissingGraph { level: k })?;
                        mp.apply(p, hk, g).map_err(|e| match e {
                            GraphError::Nd(source) => ForecastError::At {
                                level: k,
                                stage: format!("message passing layer {l}"),
                                source,
                            },
                            other => other.into(),
                        })
                    }
                    None => Ok(hk),
                },
                |k, x| {
                    let mu = &self.mu[l][k];
                    let mut out = mu.apply(p, x).map_err(at(k, format!("update layer {l}")))?;
                    if self.config.mu_residual {
                        let own = x.slice_cols(0, self.config.d_h).map_err(at(k, "residual"))?;
                        out = out.add(own).map_err(at(k, "residual"))?;
                    }
                    Ok(out)
                },
            )?;
        }
        h.iter()
            .enumerate()
            .map(|(k, &hk)| {
                let x = concat_cols(&[hk, emb_tiled[k]]).map_err(at(k, "readout"))?;
                self.readout[k].apply(p, x).map_err(at(k, "readout"))
            })
            .collect()
    }

    /// Model outputs for fixed, constant selections and unbatched inputs;
    /// convenience for inference and tests.
    pub fn predict(
        &self,
        windows: &[(Tensor, Option<Tensor>)],
        selections: &[Tensor],
        graphs: &[Option<&PreparedGraph>],
    ) -> Result<Vec<Tensor>, ForecastError> {
        let tape = crate::ndiff::Tape::new();
        let p = self.params.bind_frozen(&tape);
        let inputs: Vec<LevelWindow> = windows
            .iter()
            .map(|(y, u)| LevelWindow {
                y: tape.constant(y.clone()),
                u: u.as_ref().map(|u| tape.constant(u.clone())),
            })
            .collect();
        let sel: Vec<Var> = selections.iter().map(|s| tape.constant(s.clone())).collect();
        let out = self.forward(&p, &inputs, &sel, graphs)?;
        Ok(out.iter().map(|v| Rc::unwrap_or_clone(v.value())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(levels: usize) -> Model {
        let cfg = ModelConfig {
            d_h: 4,
            d_e: 3,
            window: 4,
            horizon: 3,
            ..ModelConfig::default()
        };
        Model::new(cfg, 5, 0, levels, &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
    }

    #[test]
    fn config_validation() {
        let cfg = ModelConfig {
            window: 0,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(ForecastError::Config(_))));
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn parameter_layout() {
        let flat = tiny(1);
        assert!(flat.mu.is_empty());
        assert_eq!(flat.encoders.len(), 1);
        let deep = tiny(3);
        assert_eq!(deep.mu.len(), 2);
        assert_eq!(deep.mu[0].len(), 3);
        assert!(deep.mp[0][0].is_some());
        assert!(deep.mp[0][1].is_none());
        assert_eq!(deep.encoders.len(), 3);
    }

    #[test]
    fn stack_levels_places_blocks_top_first() {
        let tape = Tape::new();
        let bottom = tape.constant(Tensor::column(&[1.0, 2.0, 3.0, 4.0]));
        let top = tape.constant(Tensor::column(&[10.0, 20.0]));
        let stacked = stack_levels(&[bottom, top], &[2, 1]).unwrap();
        assert_eq!(stacked.value().data(), &[10.0, 1.0, 2.0, 20.0, 3.0, 4.0]);
    }
}
