use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::{Real, Tensor};

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    value: Arc<Tensor<T>>,
    grad: Option<Tensor<T>>,
}

impl<T: Real> Param<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub(crate) fn shared(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }
}

/// Named trainable parameters plus non-trainable buffers (batch-norm running
/// statistics). Iteration follows registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        self.params.insert(
            name,
            Param {
                value: Arc::new(value),
                grad: None,
            },
        );
        Ok(())
    }

    pub fn register_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Contract(format!("buffer `{name}` registered twice")));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.get(name)?.value())
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    /// Mutable access to a parameter value. Clones the storage if a live
    /// graph still shares it.
    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        Ok(Arc::make_mut(&mut p.value))
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.value_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown buffer `{name}`")))
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown buffer `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "buffer `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor<T>)>) -> Result<()> {
        for (name, value) in updates {
            self.set_buffer(&name, value)?;
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Number of trainable scalars in parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    /// Gives every parameter without a gradient an explicit zero gradient.
    pub(crate) fn fill_missing_grads(&mut self) {
        for p in self.params.values_mut() {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape().to_vec()));
            }
        }
    }

    /// Applies `f(name, value, grad)` to each parameter in order.
    pub(crate) fn for_each_mut(
        &mut self,
        mut f: impl FnMut(&str, &mut Tensor<T>, Option<&Tensor<T>>) -> Result<()>,
    ) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            let value = Arc::make_mut(&mut p.value);
            f(name, value, p.grad.as_ref())?;
        }
        Ok(())
    }

    pub(crate) fn grads_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.values_mut().filter_map(|p| p.grad.as_mut())
    }

    /// Overwrites every parameter with N(0, std^2) samples. Used to move away
    /// from structured initializations (zero projections, unit gains) before
    /// gradient checks.
    pub fn randomize(&mut self, rng: &mut impl Rng, std: f64) {
        let normal = Normal::new(0.0, std).expect("finite std");
        for p in self.params.values_mut() {
            let value = Arc::make_mut(&mut p.value);
            for v in value.data_mut() {
                *v = T::of(normal.sample(rng));
            }
        }
    }

    /// Converts every parameter and buffer to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: Arc::new(p.value.cast()),
                            grad: p.grad.as_ref().map(Tensor::cast),
                        },
                    )
                })
                .collect(),
            buffers: self.buffers.iter().map(|(k, b)| (k.clone(), b.cast())).collect(),
        }
    }
}
