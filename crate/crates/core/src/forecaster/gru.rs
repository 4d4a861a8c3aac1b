use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ndiff::{concat_cols, Bound, NdError, ParamStore, Tensor, Var};
use crate::nn::Linear;

/// Gated recurrent unit over `[y_t | u_t | v]`.
///
/// ```text
/// r  = σ(x W_r + h U_r + b_r)
/// z  = σ(x W_z + h U_z + b_z)
/// c  = tanh(x W_c + (r ∘ h) U_c + b_c)
/// h' = z ∘ h + (1 - z) ∘ c
/// ```
///
/// The three gate projections of the step input are fused into one
/// `d_in x 3d_h` map, ordered `[r | z | c]`. The embedding part is
/// projected once per sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub step_input: Linear,
    pub embedding: Option<Linear>,
    pub hidden_rz: Linear,
    pub hidden_c: Linear,
    pub d_h: usize,
}

impl GruParams {
    /// `d_step` is the per-step width (`1 + d_u`), `d_e` the embedding width.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_step: usize,
        d_e: usize,
        d_h: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let step_input = Linear::new(store, &format!("{name}.x"), d_step, 3 * d_h, true, rng);
        let embedding =
            (d_e > 0).then(|| Linear::new(store, &format!("{name}.v"), d_e, 3 * d_h, false, rng));
        let hidden_rz = Linear::new(store, &format!("{name}.h_rz"), d_h, 2 * d_h, false, rng);
        let hidden_c = Linear::new(store, &format!("{name}.h_c"), d_h, d_h, false, rng);
        Self {
            step_input,
            embedding,
            hidden_rz,
            hidden_c,
            d_h,
        }
    }

    /// Final hidden state after running over `steps`, each `rows x d_step`.
    /// `emb` holds one embedding row per input row.
    pub fn encode<'t>(
        &self,
        p: &Bound<'t>,
        steps: &[Var<'t>],
        emb: Option<Var<'t>>,
    ) -> Result<Var<'t>, NdError> {
        let first = steps.first().ok_or(NdError::Empty { op: "gru" })?;
        let tape = first.tape();
        let rows = first.dims().0;
        let d = self.d_h;
        let emb_proj = match (&self.embedding, emb) {
            (Some(lin), Some(v)) => Some(lin.apply(p, v)?),
            _ => None,
        };
        let mut h = tape.constant(Tensor::zeros(rows, d));
        for x in steps {
            let mut gates = self.step_input.apply(p, *x)?;
            if let Some(e) = emb_proj {
                gates = gates.add(e)?;
            }
            let hrz = self.hidden_rz.apply(p, h)?;
            let r = gates.slice_cols(0, d)?.add(hrz.slice_cols(0, d)?)?.sigmoid()?;
            let z = gates.slice_cols(d, 2 * d)?.add(hrz.slice_cols(d, 2 * d)?)?.sigmoid()?;
            let c = gates
                .slice_cols(2 * d, 3 * d)?
                .add(self.hidden_c.apply(p, r.mul(h)?)?)?
                .tanh()?;
            // z*h + (1-z)*c == c + z*(h - c)
            h = c.add(z.mul(h.sub(c)?)?)?;
        }
        Ok(h)
    }
}

/// Splits a `rows x (W * width)` step-major window into `W` step inputs,
/// prepending the target column of each step.
pub(crate) fn step_inputs<'t>(
    y: Var<'t>,
    u: Option<(Var<'t>, usize)>,
) -> Result<Vec<Var<'t>>, NdError> {
    let w = y.dims().1;
    (0..w)
        .map(|t| {
            let yt = y.slice_cols(t, t + 1)?;
            match u {
                Some((u, du)) if du > 0 => concat_cols(&[yt, u.slice_cols(t * du, (t + 1) * du)?]),
                _ => Ok(yt),
            }
        })
        .collect()
}
