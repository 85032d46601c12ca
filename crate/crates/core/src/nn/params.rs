//! Named parameter storage with deterministic, seeded initialisation.
//!
//! Every learnable tensor of a model lives in a [`ParamStore`] under a dotted
//! path such as `backbone.stage1.down.weight`. Layers request parameters through
//! a [`Scope`]; a request for a name that already exists returns the stored
//! variable, which is how a second model (the EMA teacher) is bound to a cloned
//! store without re-initialising anything.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal { std: f64 },
    /// Uniform in `[-bound, bound]`.
    Uniform { bound: f64 },
}

impl Init {
    /// PyTorch-style default for conv/linear layers: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform {
            bound: 1.0 / (fan_in.max(1) as f64).sqrt(),
        }
    }
}

pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    rng: Mutex<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("num_tensors", &self.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.vars
            .lock()
            .unwrap()
            .values()
            .map(|v| v.elem_count())
            .sum()
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    /// Copies every tensor into fresh variables; the copy shares no storage with `self`.
    pub fn deep_clone(&self) -> Result<ParamStore> {
        let vars = self.vars.lock().unwrap();
        let mut out = BTreeMap::new();
        for (k, v) in vars.iter() {
            out.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(ParamStore {
            vars: Mutex::new(out),
            rng: Mutex::new(self.rng.lock().unwrap().clone()),
            dtype: self.dtype,
            device: self.device.clone(),
        })
    }

    /// Overwrites stored values in place. Every stored name must be present in
    /// `tensors` with an identical shape.
    pub fn assign_all(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let vars = self.vars.lock().unwrap();
        for (name, var) in vars.iter() {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: stored {:?}, got {:?}",
                    var.dims(),
                    src.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Snapshot of all values (copies, detached from the variables).
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let vars = self.vars.lock().unwrap();
        let mut out = BTreeMap::new();
        for (k, v) in vars.iter() {
            out.insert(k.clone(), v.as_tensor().copy()?);
        }
        Ok(out)
    }

    fn fetch_or_init(&self, name: String, shape: Shape, init: Init) -> Result<Tensor> {
        let mut vars = self.vars.lock().unwrap();
        if let Some(v) = vars.get(&name) {
            if v.shape() != &shape {
                return Err(Error::Contract(format!(
                    "parameter `{name}` requested with shape {shape:?} but stored as {:?}",
                    v.shape()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n = shape.elem_count();
        let values: Vec<f64> = {
            let mut rng = self.rng.lock().unwrap();
            match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(c) => vec![c; n],
                Init::Normal { std } => (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut *rng);
                        z * std
                    })
                    .collect(),
                Init::Uniform { bound } => (0..n)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect(),
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(name, var);
        Ok(out)
    }
}

/// A path prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.fetch_or_init(full, shape.into(), init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}
