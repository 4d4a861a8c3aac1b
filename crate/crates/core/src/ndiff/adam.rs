//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::{NdError, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: one pair of moment estimates per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .values()
            .iter()
            .map(|p| {
                let (r, c) = p.dims();
                Tensor::zeros(r, c)
            })
            .collect();
        Self {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second_moment
    }

    /// Applies one update. Nothing is modified when any gradient is invalid.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<(), NdError> {
        for (i, (p, g)) in params.values().iter().zip(grads).enumerate() {
            let name = || params.name(super::ParamId(i)).to_string();
            if p.dims() != g.dims() {
                return Err(NdError::GradientShape {
                    name: name(),
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(NdError::NonFiniteGradient { name: name() });
            }
        }

        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step_count as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        for ((p, g), (m, v)) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
