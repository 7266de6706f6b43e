//! Adaptive-moment optimizer with decoupled weight decay, and the epoch
//! learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::params::{ParamRole, ParamStore};
use crate::real::{lit, Real};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1)
            || !unit(self.beta2)
            || !(self.eps > 0.0)
            || !(self.weight_decay >= 0.0)
        {
            return Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        Ok(())
    }
}

/// Optimizer state: step count and first/second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    config: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    /// Zero moments shaped like `params`. Teacher and frozen stores are
    /// refused: they are never optimized.
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        check_role(params)?;
        let zeros: BTreeMap<String, Tensor<T>> = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Restore saved state; moments must match `params` in names and shapes.
    pub fn from_state(
        config: AdamWConfig,
        params: &ParamStore<T>,
        step: u64,
        m: BTreeMap<String, Tensor<T>>,
        v: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        let fresh = Self::new(config, params)?;
        for saved in [&m, &v] {
            let same = saved.len() == fresh.m.len()
                && saved
                    .iter()
                    .all(|(k, t)| fresh.m.get(k).is_some_and(|z| z.shape() == t.shape()));
            if !same {
                return Err(Error::Config(
                    "optimizer state does not match the parameter layout".into(),
                ));
            }
        }
        Ok(Self {
            step,
            m,
            v,
            ..fresh
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.m
    }

    pub fn second_moments(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.v
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left untouched, moments included.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        check_role(params)?;
        if let Some(k) = grads.keys().find(|k| !self.m.contains_key(*k)) {
            return Err(Error::MissingParam(k.clone()));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - num_traits::Float::powi(c.beta1, t);
        let bc2 = 1.0 - num_traits::Float::powi(c.beta2, t);
        let (b1, b2): (T, T) = (lit(c.beta1), lit(c.beta2));
        let (ob1, ob2): (T, T) = (lit(1.0 - c.beta1), lit(1.0 - c.beta2));
        let step_size: T = lit(lr / bc1);
        let inv_bc2_sqrt: T = lit(1.0 / num_traits::Float::sqrt(bc2));
        let eps: T = lit(c.eps);
        let decay: T = lit(1.0 - lr * c.weight_decay);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(crate::error::shape_mismatch(
                    "optimizer step",
                    p.shape(),
                    g.shape(),
                ));
            }
            let m = self.m.get_mut(name).expect("checked above");
            let v = self.v.get_mut(name).expect("checked above");
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &g), (m, v)) in iter {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let denom = v.sqrt() * inv_bc2_sqrt + eps;
                *p = *p * decay - step_size * *m / denom;
            }
        }
        Ok(())
    }
}

fn check_role<T: Real>(params: &ParamStore<T>) -> Result<()> {
    match params.role() {
        ParamRole::Teacher | ParamRole::Frozen => Err(Error::Precondition(format!(
            "{:?} parameters cannot be optimized",
            params.role()
        ))),
        _ => Ok(()),
    }
}

/// Constant for the first `constant_epochs`, then linear decay reaching
/// zero at `total_epochs`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub constant_epochs: u32,
    pub total_epochs: u32,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0) || self.constant_epochs > self.total_epochs || self.total_epochs == 0
        {
            return Err(Error::Config(format!(
                "invalid learning-rate schedule {self:?}"
            )));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: u32) -> f64 {
        if epoch < self.constant_epochs {
            return self.base;
        }
        if epoch >= self.total_epochs {
            return 0.0;
        }
        let left = (self.total_epochs - epoch) as f64;
        let span = (self.total_epochs - self.constant_epochs) as f64;
        self.base * (left / span)
    }
}
