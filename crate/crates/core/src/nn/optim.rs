use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            max_grad_norm: Some(1.0),
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
    decay: bool,
}

/// Adam with decoupled weight decay over one parameter group.
///
/// Rank-0/1 tensors (biases, norm gains) are exempt from decay.
pub struct AdamW {
    slots: Vec<Slot>,
    step: u64,
    cfg: AdamWConfig,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Result<Self> {
        let mut slots = Vec::new();
        for (name, var) in store.vars() {
            let m = var.zeros_like()?;
            let v = var.zeros_like()?;
            let decay = var.rank() >= 2;
            slots.push(Slot { name, var, m, v, decay });
        }
        Ok(Self { slots, step: 0, cfg })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from `grads`. Parameters without a gradient are left
    /// untouched (their moments are not advanced either).
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let scale = match self.cfg.max_grad_norm {
            Some(max) => {
                let mut sq = 0f64;
                for slot in &self.slots {
                    if let Some(g) = grads.get(slot.var.as_tensor()) {
                        sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
                    }
                }
                let norm = sq.sqrt();
                if norm > max { max / (norm + 1e-12) } else { 1.0 }
            }
            None => 1.0,
        };
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else { continue };
            let g = (g.detach() * scale)?;
            slot.m = ((&slot.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?.detach();
            slot.v = ((&slot.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?.detach();
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let theta = slot.var.as_tensor();
            let decayed = if slot.decay {
                (theta.detach() * (1.0 - c.lr * c.weight_decay))?
            } else {
                theta.detach()
            };
            slot.var.set(&(decayed - (update * c.lr)?)?)?;
        }
        Ok(())
    }

    /// First/second moments keyed by parameter name, for checkpointing.
    pub fn moments(&self) -> Vec<(String, Tensor, Tensor)> {
        self.slots
            .iter()
            .map(|s| (s.name.clone(), s.m.clone(), s.v.clone()))
            .collect()
    }

    pub fn restore(&mut self, step: u64, moments: &[(String, Tensor, Tensor)]) -> Result<()> {
        for (name, m, v) in moments {
            if let Some(slot) = self.slots.iter_mut().find(|s| &s.name == name) {
                slot.m = m.clone();
                slot.v = v.clone();
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Init, Params};
    use candle_core::Device;

    #[test]
    fn minimizes_a_quadratic() {
        let dev = Device::Cpu;
        let store = ParamStore::new();
        let p = Params::init(&store, 0, &dev);
        let w = p.get("w", (2, 2), Init::Ones).unwrap();
        let target = Tensor::new(&[[0.5f32, -1.0], [2.0, 0.0]], &dev).unwrap();
        let mut opt = AdamW::new(
            &store,
            AdamWConfig { lr: 0.05, weight_decay: 0.0, max_grad_norm: None, ..Default::default() },
        )
        .unwrap();
        for _ in 0..400 {
            let loss = (&w - &target).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let err = (&w - &target).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(err < 1e-2, "{err}");
        assert_eq!(opt.steps_taken(), 400);
    }

    #[test]
    fn decay_skips_vectors() {
        let dev = Device::Cpu;
        let store = ParamStore::new();
        let p = Params::init(&store, 0, &dev);
        let mat = p.get("mat", (2, 2), Init::Ones).unwrap();
        let vec = p.get("vec", 2, Init::Ones).unwrap();
        let mut opt = AdamW::new(&store, AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() }).unwrap();
        // zero gradient: only decoupled decay can move the parameters
        let zero = Tensor::zeros((), DType::F32, &dev).unwrap();
        let loss = (mat.sum_all().unwrap() + vec.sum_all().unwrap()).unwrap().mul(&zero).unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let m = mat.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let v = vec.to_vec1::<f32>().unwrap();
        assert!(m.iter().all(|x| (x - 0.95).abs() < 1e-6));
        assert!(v.iter().all(|x| (x - 1.0).abs() < 1e-6));
    }
}
