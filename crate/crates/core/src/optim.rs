//! AdamW with checkpointable state (first/second moments and step count),
//! iterating parameters in name order for reproducible updates.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};

use crate::params::ParamSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    vars: Vec<(String, Var)>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step_count: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: AdamWConfig) -> Result<Self> {
        let mut vars = Vec::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in params.iter() {
            vars.push((name.clone(), var.clone()));
            m.insert(name.clone(), var.zeros_like()?.detach());
            v.insert(name.clone(), var.zeros_like()?.detach());
        }
        Ok(AdamW {
            cfg,
            vars,
            m,
            v,
            step_count: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Decoupled weight decay applies to matrix-shaped `weight` parameters
    /// only; biases, norms, positions, and codebook codes are exempt.
    fn decays(name: &str, var: &Var) -> bool {
        name.ends_with("weight") && var.dims().len() >= 2
    }

    /// One update with the given learning rate; parameters without a
    /// gradient in `grads` are left untouched.
    pub fn step(&mut self, lr: f64, grads: &GradStore) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (name, var) in &self.vars {
            let Some(grad) = grads.get(var) else {
                continue;
            };
            let grad = grad.detach();
            let m = self.m.get_mut(name).unwrap();
            let v = self.v.get_mut(name).unwrap();
            *m = ((&*m * self.cfg.beta1)? + (&grad * (1.0 - self.cfg.beta1))?)?;
            *v = ((&*v * self.cfg.beta2)? + (grad.sqr()? * (1.0 - self.cfg.beta2))?)?;
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let update = (m_hat * lr)?.div(&(v_hat.sqrt()? + self.cfg.eps)?)?;
            let mut next = (var.as_tensor().detach() - update)?;
            if self.cfg.weight_decay > 0.0 && Self::decays(name, var) {
                next = (next - (var.as_tensor().detach() * (lr * self.cfg.weight_decay))?)?;
            }
            var.set(&next)?;
        }
        Ok(())
    }

    /// Serialize moment tensors plus the step counter.
    pub fn dump_state(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, _) in &self.vars {
            out.insert(format!("m.{name}"), self.m[name].copy()?);
            out.insert(format!("v.{name}"), self.v[name].copy()?);
        }
        out.insert(
            "t".to_string(),
            Tensor::from_vec(
                vec![self.step_count as f32],
                1,
                &candle_core::Device::Cpu,
            )?,
        );
        Ok(out)
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let t = state
            .get("t")
            .ok_or_else(|| Error::Checkpoint("optimizer state missing step counter".into()))?;
        self.step_count = t.flatten_all()?.to_vec1::<f32>()?[0] as u64;
        for (name, _) in &self.vars {
            let mk = format!("m.{name}");
            let vk = format!("v.{name}");
            let ms = state
                .get(&mk)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state missing '{mk}'")))?;
            let vs = state
                .get(&vk)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state missing '{vk}'")))?;
            self.m.insert(name.clone(), ms.copy()?);
            self.v.insert(name.clone(), vs.copy()?);
        }
        Ok(())
    }
}
