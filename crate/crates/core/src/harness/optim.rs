//! AdamW with layer-wise learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::partition::{ParamPartition, Role};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub layer_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { base_lr: 1e-4, weight_decay: 0.1, layer_decay: 0.7, epochs: 20, batch_size: 8, seed: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.weight_decay >= 0.0
            && self.layer_decay > 0.0
            && self.layer_decay <= 1.0
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// `base_lr · layer_decay^(max_depth − depth)`.
    pub fn effective_lr(&self, depth: usize, max_depth: usize) -> f64 {
        self.base_lr * self.layer_decay.powi(max_depth.saturating_sub(depth) as i32)
    }
}

#[derive(Clone, Debug)]
struct Moments {
    id: ParamId,
    lr: f64,
    decay: bool,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Decoupled-weight-decay Adam over the adapter side of a partition.
/// Weight decay applies to matrices and kernels only.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: OptimizerConfig,
    state: Vec<Moments>,
    step: u64,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, store: &ParamStore, part: &ParamPartition) -> Result<Self> {
        config.validate()?;
        let state = part
            .ids(Role::Adapter)
            .map(|id| {
                let p = store.get(id);
                let n = p.tensor.len();
                Moments {
                    id,
                    lr: config.effective_lr(part.get(id).stage_depth, part.max_depth),
                    decay: p.tensor.rank() >= 2,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Ok(Self { config, state, step: 0 })
    }

    pub fn lr_of(&self, id: ParamId) -> Option<f64> {
        self.state.iter().find(|s| s.id == id).map(|s| s.lr)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated `grad` of each adapter
    /// parameter and clears it. Frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for st in &mut self.state {
            let t = &mut store.get_mut(st.id).tensor;
            let Some(g) = t.grad.take() else { continue };
            let wd = if st.decay { c.weight_decay } else { 0.0 };
            let data = t.data_mut();
            for i in 0..data.len() {
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g[i];
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = st.m[i] / bc1;
                let vh = st.v[i] / bc2;
                data[i] -= st.lr * (mh / (vh.sqrt() + c.eps) + wd * data[i]);
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite value after update of {}", store.get(st.id).name)));
            }
        }
        Ok(())
    }
}
