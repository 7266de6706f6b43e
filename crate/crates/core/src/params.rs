//! Named parameter collections.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Who owns a parameter collection; optimizers refuse teacher and frozen sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Student,
    Teacher,
    Discriminator,
    Frozen,
}

/// Ordered map from dot-separated parameter names to tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    role: ParamRole,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(role: ParamRole) -> Self {
        Self {
            role,
            tensors: BTreeMap::new(),
        }
    }

    pub fn role(&self) -> ParamRole {
        self.role
    }

    /// Same tensors under a different role.
    pub fn with_role(&self, role: ParamRole) -> Self {
        Self {
            role,
            tensors: self.tensors.clone(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same names with the same shapes, in both directions.
    pub fn check_congruent(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Config(alloc::format!(
                "parameter sets differ in size: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.tensors.iter().zip(other.tensors.iter()) {
            if na != nb {
                return Err(Error::Config(alloc::format!(
                    "parameter name mismatch: {} vs {}",
                    na,
                    nb
                )));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Config(alloc::format!(
                    "parameter {} shape mismatch: {:?} vs {:?}",
                    na,
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Check names and shapes against an expected layout.
    pub fn check_layout(&self, layout: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in layout {
            let t = self.get(name)?;
            if t.shape() != &shape[..] {
                return Err(Error::Config(alloc::format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    shape
                )));
            }
        }
        if self.len() != layout.len() {
            let extra = self
                .names()
                .find(|n| !layout.iter().any(|(l, _)| l == *n))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Config(alloc::format!(
                "unexpected parameter {}",
                extra
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            role: self.role,
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Put every tensor on the tape; leaves when `trainable`, constants otherwise.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.leaf(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Bind names to existing graph handles.
    pub fn from_vars<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Shorthand for `get(&format!("{prefix}.{leaf}"))`.
    pub fn at(&self, prefix: &str, leaf: &str) -> Result<Var> {
        let mut name = String::with_capacity(prefix.len() + leaf.len() + 1);
        name.push_str(prefix);
        name.push('.');
        name.push_str(leaf);
        self.get(&name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradient for every bound name, zeros where the loss did not reach.
    pub fn gradients<T: Real>(
        &self,
        g: &Graph<T>,
        grads: &Grads<T>,
    ) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(g, v)))
            .collect()
    }
}

/// Normal(0, std) truncated to `±2 std` by rejection.
pub fn trunc_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::from_f64(v);
        }
    })
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn fan_in_uniform<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = 1.0 / num_traits::Float::sqrt(fan_in.max(1) as f64);
    let dist = Uniform::new_inclusive(-bound, bound).unwrap();
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}
