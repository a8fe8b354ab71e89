//! AdamW with decoupled weight decay and checkpointable moments.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MOMENT1_PREFIX: &str = "optim.m.";
pub const MOMENT2_PREFIX: &str = "optim.v.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Debug)]
struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

#[derive(Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    slots: Vec<Slot>,
    step: u64,
}

impl AdamW {
    /// Optimises `vars` (name, variable) pairs; moments start at zero.
    pub fn new(vars: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|(name, var)| {
                let z = var.as_tensor().zeros_like()?;
                Ok(Slot {
                    name,
                    m: z.clone(),
                    v: z,
                    var,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, slots, step: 0 })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn learning_rate(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Global L2 norm of the gradients present in `grads`.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for s in &self.slots {
            if let Some(g) = grads.get(s.var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update; parameters without a gradient are left untouched.
    /// `clip` rescales gradients to at most that global norm.
    pub fn step(&mut self, grads: &GradStore, clip: Option<f64>) -> Result<()> {
        let scale = match clip {
            Some(c) => {
                let n = self.grad_norm(grads)?;
                if n > c { c / n } else { 1.0 }
            }
            None => 1.0,
        };
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for s in &mut self.slots {
            let Some(g) = grads.get(s.var.as_tensor()) else { continue };
            let g = (g.detach() * scale)?;
            s.m = ((&s.m * beta1)? + (&g * (1.0 - beta1))?)?.detach();
            s.v = ((&s.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            let m_hat = (&s.m / bc1)?;
            let v_hat = (&s.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let theta = s.var.as_tensor().detach();
            let next = ((&theta * (1.0 - lr * weight_decay))? - (update * lr)?)?;
            s.var.set(&next)?;
        }
        Ok(())
    }

    /// Moments as named tensors for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        self.slots
            .iter()
            .flat_map(|s| {
                [
                    (format!("{MOMENT1_PREFIX}{}", s.name), s.m.clone()),
                    (format!("{MOMENT2_PREFIX}{}", s.name), s.v.clone()),
                ]
            })
            .collect()
    }

    /// Restores moments and the step counter.
    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        for s in &mut self.slots {
            for (prefix, slot) in [(MOMENT1_PREFIX, &mut s.m), (MOMENT2_PREFIX, &mut s.v)] {
                let key = format!("{prefix}{}", s.name);
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state `{key}`")))?;
                if t.dims() != slot.dims() {
                    return Err(Error::Checkpoint(format!("optimizer state `{key}` has wrong shape")));
                }
                *slot = t.to_dtype(slot.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}
