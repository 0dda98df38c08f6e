//! Adam with bias-corrected moments.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer over a fixed group of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    params: Vec<ParamId>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let first: Vec<Tensor> = params
            .iter()
            .map(|&id| Tensor::zeros(store.value(id).shape()))
            .collect();
        Self {
            config,
            second: first.clone(),
            first,
            params,
            steps: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.steps as i32);
        let bias2 = 1.0 - beta2.powi(self.steps as i32);
        for (k, &id) in self.params.iter().enumerate() {
            let p = store.get_mut(id);
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Moment tensors, in parameter order, for checkpointing.
    pub fn state(&self) -> (&[Tensor], &[Tensor], u64) {
        (&self.first, &self.second, self.steps)
    }

    pub fn restore(&mut self, first: Vec<Tensor>, second: Vec<Tensor>, steps: u64) -> crate::Result<()> {
        let ok = first.len() == self.first.len()
            && second.len() == self.second.len()
            && first.iter().zip(&self.first).all(|(a, b)| a.shape() == b.shape())
            && second.iter().zip(&self.second).all(|(a, b)| a.shape() == b.shape());
        if !ok {
            return Err(crate::Error::Format("optimizer state does not match parameters".into()));
        }
        self.first = first;
        self.second = second;
        self.steps = steps;
        Ok(())
    }
}
