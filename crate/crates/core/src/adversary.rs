//! Patch discriminator and the adversarial loss pair.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::ImageTensor;
use crate::params::{trunc_normal, BoundParams, ParamRole, ParamStore};
use crate::real::{lit, Real};
use crate::tensor::Tensor;

const KERNEL: usize = 4;
const PAD: usize = 1;
const STRIDES: [usize; 4] = [2, 2, 2, 1];
const WIDTH_MULT: [usize; 4] = [1, 2, 4, 8];
const SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Width of the discriminator's first layer; later layers double it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_width: 64 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Config(
                "discriminator base_width must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Name and shape of every parameter. Normalized layers carry no bias.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, m) in WIDTH_MULT.iter().enumerate() {
            let cout = self.base_width * m;
            out.push((
                format!("layers.{i}.weight"),
                vec![KERNEL, KERNEL, cin, cout],
            ));
            if i == 0 {
                out.push((format!("layers.{i}.bias"), vec![cout]));
            }
            cin = cout;
        }
        out.push(("head.weight".into(), vec![KERNEL, KERNEL, cin, 1]));
        out.push(("head.bias".into(), vec![1]));
        out
    }

    /// Logit grid side for an input side `n`, if the input is large enough.
    pub fn output_side(n: usize) -> Option<usize> {
        let mut n = n;
        for s in STRIDES.iter().chain(&[1]) {
            n = crate::ops::conv_out_size(n, KERNEL, *s, PAD)?;
        }
        Some(n)
    }
}

/// Per-patch realness logits `[B, 1, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLogits<T>(Tensor<T>);

impl<T: Real> PatchLogits<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.rank() != 4 || t.shape()[1] != 1 || !t.is_finite() {
            return Err(Error::Config(format!(
                "patch logits must be finite [B, 1, h, w], got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Four 4x4 convolutions (strides 2, 2, 2, 1; instance norm from the second
/// on; LeakyReLU 0.2) and a one-channel 4x4 head.
pub fn discriminate_graph<T: Real>(g: &mut Graph<T>, p: &BoundParams, img: Var) -> Result<Var> {
    let s = g.shape(img);
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Config(format!(
            "discriminator expects [B, 3, H, W], got {s:?}"
        )));
    }
    if DiscriminatorConfig::output_side(s[2]).is_none()
        || DiscriminatorConfig::output_side(s[3]).is_none()
    {
        return Err(Error::Config(format!(
            "image {}x{} is too small for the discriminator",
            s[2], s[3]
        )));
    }
    let mut x = g.to_nhwc(img)?;
    for (i, &stride) in STRIDES.iter().enumerate() {
        let w = p.get(&format!("layers.{i}.weight"))?;
        if i == 0 {
            let b = p.get("layers.0.bias")?;
            x = g.conv2d(x, w, Some(b), stride, PAD)?;
        } else {
            x = g.conv2d(x, w, None, stride, PAD)?;
            x = g.instance_norm(x, lit(NORM_EPS))?;
        }
        x = g.leaky_relu(x, lit(SLOPE));
    }
    let (w, b) = (p.get("head.weight")?, p.get("head.bias")?);
    let x = g.conv2d(x, w, Some(b), 1, PAD)?;
    g.to_nchw(x)
}

/// `mean BCE(real, 1) + mean BCE(fake, 0)`.
pub fn discriminator_loss_graph<T: Real>(
    g: &mut Graph<T>,
    real_logits: Var,
    fake_logits: Var,
) -> Var {
    let r = g.bce_with_logits_mean(real_logits, T::one());
    let f = g.bce_with_logits_mean(fake_logits, T::zero());
    g.add(r, f).expect("scalar losses")
}

/// Non-saturating generator loss `mean BCE(fake, 1)`.
pub fn generator_adv_loss_graph<T: Real>(g: &mut Graph<T>, fake_logits: Var) -> Var {
    g.bce_with_logits_mean(fake_logits, T::one())
}

/// Discriminator-side objective on real and generated images; the
/// generated images are detached from their producer.
pub fn discriminator_objective<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    real: Var,
    fake: Var,
) -> Result<Var> {
    let fake = g.detach(fake);
    let real = g.detach(real);
    let rl = discriminate_graph(g, p, real)?;
    let fl = discriminate_graph(g, p, fake)?;
    Ok(discriminator_loss_graph(g, rl, fl))
}

fn scalar_loss<T: Real>(ts: &[&Tensor<T>], f: impl FnOnce(&mut Graph<T>, &[Var]) -> Var) -> T {
    let mut g = Graph::new();
    let vars: Vec<Var> = ts.iter().map(|t| g.constant((*t).clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

pub fn discriminator_loss<T: Real>(
    real_logits: &PatchLogits<T>,
    fake_logits: &PatchLogits<T>,
) -> T {
    scalar_loss(&[&real_logits.0, &fake_logits.0], |g, v| {
        discriminator_loss_graph(g, v[0], v[1])
    })
}

pub fn generator_adv_loss<T: Real>(fake_logits: &PatchLogits<T>) -> T {
    scalar_loss(&[&fake_logits.0], |g, v| generator_adv_loss_graph(g, v[0]))
}

/// Discriminator weights and geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    params: ParamStore<T>,
}

impl<T: Real> Discriminator<T> {
    /// Normal(0, 0.02) weights (truncated at two std), zero biases.
    pub fn init(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(ParamRole::Discriminator);
        for (name, shape) in config.param_layout() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                trunc_normal(&shape, INIT_STD, &mut rng)
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config.param_layout())?;
        Ok(Self {
            config,
            params: params.with_role(ParamRole::Discriminator),
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn discriminate(&self, img: &ImageTensor<T>) -> Result<PatchLogits<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(img.tensor().clone());
        let out = discriminate_graph(&mut g, &p, x)?;
        PatchLogits::new(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_arithmetic() {
        assert_eq!(DiscriminatorConfig::output_side(256), Some(30));
        assert_eq!(DiscriminatorConfig::output_side(64), Some(6));
        assert_eq!(DiscriminatorConfig::output_side(16), None);
    }
}
