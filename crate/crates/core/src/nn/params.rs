use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Host copy of one named parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// `U(-bound, bound)`.
    Uniform(f64),
}

/// Named trainable parameters, iterated in name order.
#[derive(Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn device() -> Device {
        Device::Cpu
    }

    /// Creates a parameter and returns a tracked handle to it.
    pub fn create(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let count: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; count],
            Init::Const(v) => vec![v; count],
            Init::Uniform(bound) => (0..count)
                .map(|_| rng.random_range(-bound..=bound))
                .collect(),
        };
        let var = Var::from_vec(data, shape, &Self::device())?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor().clone())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Host copy of every parameter, in name order.
    pub fn snapshot(&self) -> Result<Vec<NamedTensor>> {
        self.vars
            .iter()
            .map(|(name, var)| {
                let t = var.as_tensor();
                Ok(NamedTensor {
                    name: name.clone(),
                    shape: t.dims().to_vec(),
                    data: t.flatten_all()?.to_vec1::<f64>()?,
                })
            })
            .collect()
    }

    /// Overwrites parameter values in place; names and shapes must match exactly.
    pub fn restore(&self, tensors: &[NamedTensor]) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.vars.len(),
                tensors.len()
            )));
        }
        for t in tensors {
            let var = self
                .vars
                .get(&t.name)
                .ok_or_else(|| Error::ShapeMismatch(format!("unexpected parameter {}", t.name)))?;
            if var.dims() != t.shape.as_slice() || t.data.len() != var.elem_count() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {}: stored shape {:?}, model shape {:?}",
                    t.name,
                    t.shape,
                    var.dims()
                )));
            }
            var.set(&Tensor::from_slice(&t.data, t.shape.as_slice(), &Self::device())?)?;
        }
        Ok(())
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&self) -> Result<()> {
        for var in self.vars.values() {
            var.set(&Tensor::zeros(var.shape(), DType::F64, &Self::device())?)?;
        }
        Ok(())
    }
}
