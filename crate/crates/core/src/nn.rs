//! Small layer helpers shared by the graph and forecasting modules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ndiff::{Bound, NdError, ParamId, ParamStore, Tensor, Var};

/// Glorot-uniform initialised `rows x cols` matrix.
pub fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
    Tensor::from_rows(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
    )
}

/// Affine map `x W + b` with parameters living in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.insert(format!("{name}.weight"), glorot(rng, d_in, d_out));
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Tensor::zeros(1, d_out)));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn apply<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, NdError> {
        let y = x.matmul(p.var(self.weight))?;
        match self.bias {
            Some(b) => y.add_row(p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Elu,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>, NdError> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Elu => x.elu(),
        }
    }
}
