//! AdamW with decoupled weight decay and checkpointable state.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

pub struct AdamW {
    slots: Vec<Slot>,
    params: AdamWParams,
    t: usize,
}

impl AdamW {
    /// `vars` should be name-sorted for reproducibility.
    pub fn new(vars: Vec<(String, Var)>, params: AdamWParams) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|(name, var)| {
                let zeros = var.zeros_like()?;
                Ok(Slot { name, m: zeros.clone(), v: zeros, var })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { slots, params, t: 0 })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.params.lr = lr;
    }

    pub fn learning_rate(&self) -> f64 {
        self.params.lr
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    /// One update. Parameters absent from the gradient store are skipped.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let t = self.t as f64;
        let p = &self.params;
        let bc1 = 1.0 - p.beta1.powf(t);
        let bc2 = 1.0 - p.beta2.powf(t);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            slot.m = (slot.m.affine(p.beta1, 0.0)? + g.affine(1.0 - p.beta1, 0.0)?)?;
            slot.v = (slot.v.affine(p.beta2, 0.0)? + g.sqr()?.affine(1.0 - p.beta2, 0.0)?)?;
            let m_hat = slot.m.affine(1.0 / bc1, 0.0)?;
            let v_hat = slot.v.affine(1.0 / bc2, 0.0)?;
            let update = m_hat.div(&v_hat.sqrt()?.affine(1.0, p.eps)?)?;
            let theta = slot.var.as_tensor().detach();
            // decoupled weight decay
            let new = ((&theta - update.affine(p.lr, 0.0)?)? - theta.affine(p.lr * p.weight_decay, 0.0)?)?;
            slot.var.set(&new)?;
        }
        Ok(())
    }

    /// Optimizer state as named tensors (for checkpoints).
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.slots.len());
        for s in &self.slots {
            out.push((format!("opt.m.{}", s.name), s.m.clone()));
            out.push((format!("opt.v.{}", s.name), s.v.clone()));
        }
        out
    }

    pub fn load_state(
        &mut self,
        tensors: &std::collections::HashMap<String, Tensor>,
        step: usize,
    ) -> Result<()> {
        for s in &mut self.slots {
            let m = tensors
                .get(&format!("opt.m.{}", s.name))
                .ok_or_else(|| Error::Checkpoint(format!("missing opt.m.{}", s.name)))?;
            let v = tensors
                .get(&format!("opt.v.{}", s.name))
                .ok_or_else(|| Error::Checkpoint(format!("missing opt.v.{}", s.name)))?;
            s.m = m.to_dtype(s.var.dtype())?;
            s.v = v.to_dtype(s.var.dtype())?;
        }
        self.t = step;
        Ok(())
    }
}
