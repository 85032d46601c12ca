//! AdamW with decoupled weight decay and an exportable state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Global L2 norm of all gradients present for variables in `store`.
    pub fn grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0f64;
        for (_, var) in store.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                let s = g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?;
                sq += s.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update at learning rate `lr`; gradients are multiplied by `grad_scale`
    /// first (used for norm clipping). Variables without a gradient are untouched.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64, grad_scale: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = if grad_scale != 1.0 { g.affine(grad_scale, 0.0)? } else { g.clone() };
            let m = match self.first.get(&name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let v = match self.second.get(&name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let theta = var.as_tensor();
            let decayed = (theta * (1.0 - lr * c.weight_decay))?;
            let next = (decayed - (update * lr)?)?;
            var.set(&next)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name, v);
        }
        Ok(())
    }

    /// Flat export: `m.<name>`, `v.<name>` plus the step counter.
    pub fn export(&self) -> (u64, BTreeMap<String, Tensor>) {
        let mut out = BTreeMap::new();
        for (k, t) in &self.first {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.second {
            out.insert(format!("v.{k}"), t.clone());
        }
        (self.step, out)
    }

    pub fn import(config: AdamWConfig, step: u64, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (k, t) in tensors {
            if let Some(n) = k.strip_prefix("m.") {
                first.insert(n.to_string(), t.clone());
            } else if let Some(n) = k.strip_prefix("v.") {
                second.insert(n.to_string(), t.clone());
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer entry `{k}`")));
            }
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use candle_core::DType;

    #[test]
    fn zero_gradient_only_decays() {
        let store = ParamStore::new(DType::F64, 0);
        let p = store.root().get("p", 3, Init::Const(2.0)).unwrap();
        let loss = (&p * p.zeros_like().unwrap()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        });
        opt.step(&store, &grads, 0.01, 1.0).unwrap();
        let v: Vec<f64> = store.get("p").unwrap().as_tensor().to_vec1().unwrap();
        for x in v {
            assert!((x - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first step is lr * g / (|g| + eps).
        let store = ParamStore::new(DType::F64, 0);
        let p = store.root().get("p", 2, Init::Const(1.0)).unwrap();
        let loss = (p.sqr().unwrap() * 3.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&store, &grads, 0.1, 1.0).unwrap();
        let v: Vec<f64> = store.get("p").unwrap().as_tensor().to_vec1().unwrap();
        for x in v {
            assert!((x - 0.9).abs() < 1e-6);
        }
    }
}
