//! Named, seeded parameter storage.
//!
//! Every parameter is initialized from a ChaCha stream keyed by the store
//! seed and the parameter's full path, so initialization does not depend on
//! construction order and two stores with the same seed are bit-identical.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Result};

#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform { bound: f64 },
    Normal { std: f64 },
    /// Explicit row-major values; length must match the shape.
    Values(Vec<f64>),
}

struct Inner {
    vars: Mutex<BTreeMap<String, Var>>,
    dtype: DType,
    device: Device,
    seed: u64,
}

#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Inner>,
    prefix: String,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("prefix", &self.prefix)
            .field("dtype", &self.inner.dtype)
            .field("seed", &self.inner.seed)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Inner {
                vars: Mutex::new(BTreeMap::new()),
                dtype,
                device: device.clone(),
                seed,
            }),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self {
            inner: self.inner.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    pub fn device(&self) -> &Device {
        &self.inner.device
    }

    pub fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Returns the parameter `name` under the current prefix, creating it
    /// with `init` on first use.
    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let shape = shape.into();
        let full = self.full_name(name);
        let mut vars = self.inner.vars.lock().expect("parameter store poisoned");
        if let Some(var) = vars.get(&full) {
            if var.shape() != &shape {
                return Err(shape_err(format!(
                    "parameter {full} has shape {:?}, requested {:?}",
                    var.shape(),
                    shape
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let values = self.init_values(&full, shape.elem_count(), &init)?;
        let tensor = Tensor::from_vec(values, shape, &self.inner.device)?.to_dtype(self.inner.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        vars.insert(full, var);
        Ok(out)
    }

    fn init_values(&self, full: &str, n: usize, init: &Init) -> Result<Vec<f64>> {
        let mut hasher = Sha256::new();
        hasher.update(self.inner.seed.to_le_bytes());
        hasher.update(full.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
        let values = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![*c; n],
            Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..=*bound)).collect(),
            Init::Normal { std } => (0..n)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Init::Values(v) => {
                if v.len() != n {
                    return Err(shape_err(format!(
                        "initializer for {full} has {} values, expected {n}",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        Ok(values)
    }

    /// Overwrites an existing parameter (full path, ignoring the prefix).
    pub fn set(&self, full_name: &str, value: &Tensor) -> Result<()> {
        let vars = self.inner.vars.lock().expect("parameter store poisoned");
        let var = vars
            .get(full_name)
            .ok_or_else(|| shape_err(format!("unknown parameter {full_name}")))?;
        if var.shape() != value.shape() {
            return Err(shape_err(format!(
                "parameter {full_name} has shape {:?}, got {:?}",
                var.shape(),
                value.shape()
            )));
        }
        var.set(&value.to_dtype(self.inner.dtype)?)?;
        Ok(())
    }

    pub fn var(&self, full_name: &str) -> Option<Var> {
        self.inner
            .vars
            .lock()
            .expect("parameter store poisoned")
            .get(full_name)
            .cloned()
    }

    /// All parameters sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.inner
            .vars
            .lock()
            .expect("parameter store poisoned")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Parameters whose path starts with the current prefix.
    pub fn vars_under_prefix(&self) -> Vec<Var> {
        let vars = self.inner.vars.lock().expect("parameter store poisoned");
        vars.iter()
            .filter(|(k, _)| self.prefix.is_empty() || k.starts_with(&format!("{}.", self.prefix)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.inner.vars.lock().expect("parameter store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn parameter_count(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }
}
