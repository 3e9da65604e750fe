use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Decoupled-weight-decay Adam whose moments live in named tensors so they can be
/// checkpointed next to the parameters.
pub struct AdamW {
    pub settings: AdamWSettings,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    pub steps: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore, settings: AdamWSettings) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in params.iter() {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(AdamW { settings, m, v, steps: 0 })
    }

    /// Scales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(params: &ParamStore, grads: &mut GradStore, max_norm: f64) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if max_norm > 0.0 && norm > max_norm {
            let scale = max_norm / (norm + 1e-6);
            for (_, var) in params.iter() {
                if let Some(g) = grads.remove(var.as_tensor()) {
                    grads.insert(var.as_tensor(), (g * scale)?);
                }
            }
        }
        Ok(norm)
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let s = self.settings;
        let t = self.steps as i32;
        let bc1 = 1.0 - s.beta1.powi(t);
        let bc2 = 1.0 - s.beta2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = self.m.get_mut(name).expect("moment registered at construction");
            let v = self.v.get_mut(name).expect("moment registered at construction");
            *m = ((&*m * s.beta1)? + (g * (1.0 - s.beta1))?)?;
            *v = ((&*v * s.beta2)? + (g.sqr()? * (1.0 - s.beta2))?)?;
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + s.eps)?)?;
            let theta = var.as_tensor();
            let decayed = if s.weight_decay > 0.0 {
                (theta * (1.0 - lr * s.weight_decay))?
            } else {
                theta.clone()
            };
            var.set(&(decayed - (update * lr)?)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map: HashMap<String, Tensor> = HashMap::new();
        for (k, t) in &self.m {
            map.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            map.insert(format!("v.{k}"), t.clone());
        }
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path, steps: u64) -> Result<()> {
        let device = self.m.values().next().map(|t| t.device().clone()).unwrap_or(candle_core::Device::Cpu);
        let map = candle_core::safetensors::load(path, &device)?;
        for (prefix, store) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (k, t) in store.iter_mut() {
                let src = map
                    .get(&format!("{prefix}.{k}"))
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {prefix}.{k}")))?;
                if src.dims() != t.dims() {
                    return Err(Error::Checkpoint(format!("optimizer shape mismatch for {k}")));
                }
                *t = src.to_dtype(t.dtype())?;
            }
        }
        self.steps = steps;
        Ok(())
    }
}
