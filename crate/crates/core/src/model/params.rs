//! Seeded parameter creation and checkpoint-friendly storage.
//!
//! Parameters are candle `Var`s kept in a [`VarMap`] under dotted names.
//! Initial values come from a ChaCha stream so a model is a pure function
//! of its config and seed.

use std::cell::RefCell;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct ParamBuilder {
    map: VarMap,
    rng: Rc<RefCell<ChaCha8Rng>>,
    prefix: String,
    dtype: DType,
    device: Device,
}

impl ParamBuilder {
    pub fn new(map: VarMap, seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            map,
            rng: Rc::new(RefCell::new(ChaCha8Rng::seed_from_u64(seed))),
            prefix: String::new(),
            dtype,
            device,
        }
    }

    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            prefix,
            ..self.clone()
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn register(&self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        let mut data = self.map.data().lock().expect("var map poisoned");
        if data.insert(full.clone(), var).is_some() {
            return Err(Error::Checkpoint(format!("parameter `{full}` registered twice")));
        }
        Ok(out)
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = {
            let mut rng = self.rng.borrow_mut();
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        self.register(name, values, shape)
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::config(name, e.to_string()))?;
        let values = {
            let mut rng = self.rng.borrow_mut();
            (0..n).map(|_| dist.sample(&mut *rng)).collect()
        };
        self.register(name, values, shape)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.register(name, vec![value; n], shape)
    }
}

/// Named parameters in a stable (sorted) order.
pub fn sorted_vars(map: &VarMap) -> Vec<(String, Var)> {
    let data = map.data().lock().expect("var map poisoned");
    let mut vars: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

/// Overwrites one named parameter in place.
pub fn set_param(map: &VarMap, name: &str, value: &Tensor) -> Result<()> {
    let data = map.data().lock().expect("var map poisoned");
    let var = data
        .get(name)
        .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
    if var.shape() != value.shape() {
        return Err(Error::shape("parameter", format!("{:?}", var.shape()), format!("{:?}", value.shape())));
    }
    var.set(&value.to_dtype(var.dtype())?)?;
    Ok(())
}

pub fn get_param(map: &VarMap, name: &str) -> Result<Tensor> {
    let data = map.data().lock().expect("var map poisoned");
    data.get(name)
        .map(|v| v.as_tensor().clone())
        .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))
}

/// Deep copy of every parameter value, for best-epoch snapshots.
pub fn snapshot(map: &VarMap) -> Result<Vec<(String, Tensor)>> {
    sorted_vars(map)
        .into_iter()
        .map(|(name, var)| Ok((name, var.as_tensor().copy()?)))
        .collect()
}

pub fn restore(map: &VarMap, values: &[(String, Tensor)]) -> Result<()> {
    for (name, value) in values {
        set_param(map, name, value)?;
    }
    Ok(())
}

pub fn param_count(map: &VarMap) -> usize {
    sorted_vars(map).iter().map(|(_, v)| v.elem_count()).sum()
}
