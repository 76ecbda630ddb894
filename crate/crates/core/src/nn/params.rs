//! Named parameter storage and binding into the autodiff graph.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Var};
use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::tensor::{Init, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamInit {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: ParamInit) -> Self {
        Self { name: name.into(), shape: shape.into(), init }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a, so a parameter's initial value depends only on its name and the seed
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Parameters keyed by dotted name. Iteration order is the sorted name order and
/// is the order used for gradients and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for spec in specs {
            let init = match spec.init {
                ParamInit::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    Init::Uniform { low: -bound, high: bound, seed: derive_seed(seed, name_hash(&spec.name)) }
                }
                ParamInit::Zeros => Init::Zeros,
                ParamInit::Constant(v) => Init::Constant(v),
            };
            let t = Tensor::create(spec.shape.clone(), init)?;
            if tensors.insert(spec.name.clone(), t).is_some() {
                return Err(Error::arg(format!("duplicate parameter name {}", spec.name)));
            }
        }
        Ok(Self { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    /// Add uniform noise in `±scale` to every entry. Used to move away from the
    /// zero-initialized projections when every path should carry gradient.
    pub fn perturbed(&self, seed: u64, scale: f64) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let noise = Tensor::<T>::create(
                    t.shape().to_vec(),
                    Init::Uniform { low: -scale, high: scale, seed: derive_seed(seed, name_hash(name)) },
                )
                .expect("shape already valid");
                (name.clone(), t.zip_map(&noise, |a, b| a + b).expect("same shape"))
            })
            .collect();
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Replace an existing parameter; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.tensors.values_mut().collect()
    }

    /// Check that names and shapes agree exactly with `specs`.
    pub fn check_specs(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter {}: expected {:?}, found {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        if self.len() != specs.len() {
            let known: std::collections::BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra = self.names().find(|n| !known.contains(n)).unwrap_or_default();
            return Err(Error::config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Wrap every tensor in a leaf: trainable leaves receive gradients, otherwise
    /// constants that build no graph.
    pub fn bind(&self, trainable: bool) -> BoundParams<T> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { Var::param(t.clone()) } else { Var::constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect() }
    }
}

/// Parameters as graph leaves for one forward pass.
#[derive(Clone)]
pub struct BoundParams<T: Scalar> {
    vars: BTreeMap<String, Var<T>>,
}

impl<T: Scalar> BoundParams<T> {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<T>)>) -> Self {
        Self { vars: vars.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var<T>> {
        self.vars.get(name).cloned().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_, T> {
        Scope { params: self, prefix: prefix.to_string() }
    }

    /// Gradients for every parameter, in store order.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.values().map(|v| grads.wrt(v)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var<T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// A view of bound parameters under a dotted prefix.
#[derive(Clone)]
pub struct Scope<'a, T: Scalar> {
    params: &'a BoundParams<T>,
    prefix: String,
}

impl<'a, T: Scalar> Scope<'a, T> {
    pub fn get(&self, name: &str) -> Result<Var<T>> {
        self.params.get(&join(&self.prefix, name))
    }

    pub fn child(&self, name: &str) -> Scope<'a, T> {
        Scope { params: self.params, prefix: join(&self.prefix, name) }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}
