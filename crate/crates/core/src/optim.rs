//! Adam with per-parameter step counts and global-norm gradient clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{scalar, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    steps: u64,
}

/// Parameters without a gradient in a step are left untouched, moments
/// included.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Collects gradients for `params`, keyed by parameter name.
    pub fn gather(params: &ParamStore, grads: &GradStore) -> BTreeMap<String, Tensor> {
        params
            .iter()
            .filter_map(|(name, var)| grads.get(var.as_tensor()).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
        let mut sq = 0.0;
        for g in grads.values() {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
        let norm = sq.sqrt();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / (norm + 1e-6);
            for g in grads.values_mut() {
                *g = (&*g * s)?;
            }
        }
        Ok(norm)
    }

    pub fn step(&mut self, params: &ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        for (name, g) in grads {
            let var = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            let g = g.to_dtype(var.dtype())?;
            let entry = match self.state.get_mut(name) {
                Some(e) => e,
                None => {
                    let z = var.zeros_like()?;
                    self.state.insert(
                        name.clone(),
                        Moments {
                            m: z.clone(),
                            v: z,
                            steps: 0,
                        },
                    );
                    self.state.get_mut(name).unwrap()
                }
            };
            entry.steps += 1;
            entry.m = ((&entry.m * beta1)? + (&g * (1.0 - beta1))?)?;
            entry.v = ((&entry.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let t = entry.steps as i32;
            let m_hat = (&entry.m / (1.0 - beta1.powi(t)))?;
            let v_hat = (&entry.v / (1.0 - beta2.powi(t)))?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let next = (var.as_tensor().detach() - (update * lr)?)?;
            var.set(&next)?;
        }
        Ok(())
    }

    /// Moment tensors and step counts for checkpointing.
    pub fn export(&self) -> (BTreeMap<String, Tensor>, BTreeMap<String, u64>) {
        let mut tensors = BTreeMap::new();
        let mut steps = BTreeMap::new();
        for (name, s) in &self.state {
            tensors.insert(format!("adam.m.{name}"), s.m.clone());
            tensors.insert(format!("adam.v.{name}"), s.v.clone());
            steps.insert(name.clone(), s.steps);
        }
        (tensors, steps)
    }

    pub fn import(
        cfg: AdamConfig,
        tensors: &BTreeMap<String, Tensor>,
        steps: &BTreeMap<String, u64>,
        params: &ParamStore,
    ) -> Result<Self> {
        let mut state = BTreeMap::new();
        for (name, &n) in steps {
            let var = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("optimizer state for unknown parameter `{name}`")))?;
            let fetch = |k: &str| -> Result<Tensor> {
                let t = tensors
                    .get(k)
                    .ok_or_else(|| Error::Config(format!("missing optimizer tensor `{k}`")))?;
                Ok(t.to_dtype(var.dtype())?.to_device(var.device())?)
            };
            state.insert(
                name.clone(),
                Moments {
                    m: fetch(&format!("adam.m.{name}"))?,
                    v: fetch(&format!("adam.v.{name}"))?,
                    steps: n,
                },
            );
        }
        Ok(Self { cfg, state })
    }
}
