use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::{Arc, Mutex};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Shape, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::rng::Rng;
use crate::{Error, Result};

/// A named collection of trainable variables, one per parameter group.
///
/// Cloning shares the underlying variables; use [`ParamStore::deep_copy`] for
/// an independent copy.
#[derive(Clone, Default)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.len())
            .field("elements", &self.num_elements())
            .finish()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, Var>> {
        self.vars.lock().expect("parameter store poisoned")
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock().get(name).cloned()
    }

    pub fn insert(&self, name: impl Into<String>, var: Var) {
        self.lock().insert(name.into(), var);
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_elements(&self) -> usize {
        self.lock().values().map(|v| v.elem_count()).sum()
    }

    /// Variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.lock().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn deep_copy(&self) -> Result<Self> {
        let out = ParamStore::new();
        for (name, var) in self.vars() {
            out.insert(name, Var::from_tensor(&var.as_tensor().copy()?)?);
        }
        Ok(out)
    }

    /// Overwrites every variable with the value of the same-named variable in `other`.
    pub fn assign_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var) in self.vars() {
            let src = other
                .get(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
            var.set(src.as_tensor())?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian f32 values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.vars() {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// L2 norm of this group's gradients in `grads`; absent entries count as zero.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0f64;
        for (_, var) in self.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        self.vars().into_iter().map(|(k, v)| (k, v.as_tensor().clone())).collect()
    }

    pub fn from_tensors<I: IntoIterator<Item = (String, Tensor)>>(items: I) -> Result<Self> {
        let out = ParamStore::new();
        for (name, t) in items {
            out.insert(name, Var::from_tensor(&t.to_dtype(DType::F32)?)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Scaled identity for a square matrix.
    Eye(f64),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
}

#[derive(Clone)]
enum Mode {
    Init(Rc<RefCell<Rng>>),
    Load,
}

/// Hierarchical accessor used by modules to create or fetch their parameters.
///
/// In init mode parameters are created from a seeded stream and registered in
/// the store; in load mode they are looked up and shape-checked. A frozen
/// accessor hands out detached tensors, so no gradient can reach the store.
#[derive(Clone)]
pub struct Params {
    store: ParamStore,
    prefix: String,
    mode: Mode,
    frozen: bool,
    device: Device,
}

impl Params {
    pub fn init(store: &ParamStore, seed: u64, device: &Device) -> Self {
        Self {
            store: store.clone(),
            prefix: String::new(),
            mode: Mode::Init(Rc::new(RefCell::new(Rng::new(seed)))),
            frozen: false,
            device: device.clone(),
        }
    }

    pub fn load(store: &ParamStore, device: &Device) -> Self {
        Self {
            store: store.clone(),
            prefix: String::new(),
            mode: Mode::Load,
            frozen: false,
            device: device.clone(),
        }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let mut out = self.clone();
        out.prefix = self.path(name.as_ref());
        out
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn get<S: Into<Shape>>(&self, name: &str, shape: S, init: Init) -> Result<Tensor> {
        let shape: Shape = shape.into();
        let path = self.path(name);
        let var = match &self.mode {
            Mode::Init(rng) => {
                if self.store.get(&path).is_some() {
                    return Err(Error::InvalidArgument(format!("parameter {path} registered twice")));
                }
                let t = match init {
                    Init::Zeros => Tensor::zeros(&shape, DType::F32, &self.device)?,
                    Init::Ones => Tensor::ones(&shape, DType::F32, &self.device)?,
                    Init::Const(v) => Tensor::full(v as f32, &shape, &self.device)?,
                    Init::Eye(scale) => {
                        let (r, c) = shape.dims2()?;
                        if r != c {
                            return Err(Error::shape("square matrix", (r, c)));
                        }
                        (Tensor::eye(r, DType::F32, &self.device)? * scale)?
                    }
                    Init::Normal(std) => {
                        let t = rng.borrow_mut().normal_tensor(shape.clone(), &self.device)?;
                        (t * std)?
                    }
                };
                let var = Var::from_tensor(&t)?;
                self.store.insert(path.clone(), var.clone());
                var
            }
            Mode::Load => {
                let var = self
                    .store
                    .get(&path)
                    .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {path}")))?;
                if var.shape() != &shape {
                    return Err(Error::shape(shape.dims(), var.dims()));
                }
                var
            }
        };
        if self.frozen {
            Ok(var.as_tensor().detach())
        } else {
            Ok(var.as_tensor().clone())
        }
    }
}
