//! Frozen semantic encoders producing four-stage feature pyramids.
//!
//! Encoder weights are bound as constants, so gradients reach the input
//! image but never the encoder itself.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::ImageTensor;
use crate::ops::conv_out_size;
use crate::params::{ParamRole, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

/// Cumulative stride of each pyramid stage.
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Smallest accepted input side.
pub const MIN_ENCODER_SIDE: usize = 32;

/// Four stages of channels-last features `[B, h_i, w_i, C_i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    stages: [Tensor<T>; 4],
    source_shape: (usize, usize),
}

impl<T: Real> FeaturePyramid<T> {
    pub fn new(stages: [Tensor<T>; 4], source_shape: (usize, usize)) -> Result<Self> {
        let (h, w) = source_shape;
        for (i, (s, stride)) in stages.iter().zip(PYRAMID_STRIDES).enumerate() {
            let want = [h.div_ceil(stride), w.div_ceil(stride)];
            if s.rank() != 4 || s.shape()[1..3] != want {
                return Err(Error::Config(format!(
                    "stage {} has shape {:?}, expected spatial {:?} for a {}x{} source",
                    i + 1,
                    s.shape(),
                    want,
                    h,
                    w
                )));
            }
            if !s.is_finite() {
                return Err(Error::Precondition(format!(
                    "stage {} has non-finite values",
                    i + 1
                )));
            }
        }
        Ok(Self {
            stages,
            source_shape,
        })
    }

    pub fn stages(&self) -> &[Tensor<T>; 4] {
        &self.stages
    }

    /// Stage `i` in `1..=4`.
    pub fn stage(&self, i: usize) -> &Tensor<T> {
        &self.stages[i - 1]
    }

    pub fn source_shape(&self) -> (usize, usize) {
        self.source_shape
    }
}

/// Pooled last-stage features `[B, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbedding<T>(Tensor<T>);

impl<T: Real> SemanticEmbedding<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.rank() != 2 || !t.is_finite() {
            return Err(Error::Config(format!(
                "embeddings must be finite [B, D], got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Interface shared by the seeded test pyramid and loaded encoders.
pub trait SemanticEncoder<T: Real> {
    fn stage_channels(&self) -> [usize; 4];

    /// Frozen parameters, for inspection and freeze checks.
    fn params(&self) -> &ParamStore<T>;

    /// Stage features of a `[B, 3, H, W]` image variable.
    fn encode_graph(&self, g: &mut Graph<T>, img: Var) -> Result<[Var; 4]>;

    /// Global-average-pooled stage 4, `[B, D]`.
    fn embedding_graph(&self, g: &mut Graph<T>, img: Var) -> Result<Var> {
        let stages = self.encode_graph(g, img)?;
        g.global_avg_pool(stages[3])
    }

    fn encode(&self, img: &ImageTensor<T>) -> Result<FeaturePyramid<T>> {
        let mut g = Graph::new();
        let x = g.constant(img.tensor().clone());
        let s = self.encode_graph(&mut g, x)?;
        FeaturePyramid::new(s.map(|v| g.value(v).clone()), (img.height(), img.width()))
    }

    fn final_embedding(&self, img: &ImageTensor<T>) -> Result<SemanticEmbedding<T>> {
        let mut g = Graph::new();
        let x = g.constant(img.tensor().clone());
        let e = self.embedding_graph(&mut g, x)?;
        SemanticEmbedding::new(g.value(e).clone())
    }
}

/// Geometry of one strided convolution stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub name: String,
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

impl StageSpec {
    /// Half-kernel padding; with an odd kernel the output side is
    /// `ceil(input / stride)`.
    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }
}

/// Strided convolution pyramid with a SiLU between consecutive stages.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvPyramid<T> {
    specs: [StageSpec; 4],
    params: ParamStore<T>,
}

fn test_specs() -> [StageSpec; 4] {
    let spec = |i: usize, kernel, stride, channels| StageSpec {
        name: format!("stages.{i}"),
        kernel,
        stride,
        channels,
    };
    [
        spec(0, 5, 4, 12),
        spec(1, 3, 2, 24),
        spec(2, 3, 2, 48),
        spec(3, 3, 2, 96),
    ]
}

impl<T: Real> ConvPyramid<T> {
    /// Check that the stage geometry produces the standard strides and sizes.
    pub fn validate_specs(specs: &[StageSpec; 4]) -> Result<()> {
        let mut total = 1;
        for (s, want) in specs.iter().zip(PYRAMID_STRIDES) {
            total *= s.stride;
            if total != want {
                return Err(Error::Config(format!(
                    "stage `{}` reaches stride {total}, expected {want}",
                    s.name
                )));
            }
            if s.kernel % 2 == 0 || s.kernel < s.stride || s.channels == 0 {
                return Err(Error::Config(format!(
                    "stage `{}` has an invalid kernel or width",
                    s.name
                )));
            }
            // ceil(n / stride) for every n
            for n in 1..=4 * s.stride {
                if conv_out_size(n, s.kernel, s.stride, s.padding()) != Some(n.div_ceil(s.stride)) {
                    return Err(Error::Config(format!(
                        "stage `{}` (kernel {}, stride {}) does not produce ceil-sized outputs",
                        s.name, s.kernel, s.stride
                    )));
                }
            }
        }
        Ok(())
    }

    /// Name and shape of every weight for the given stages.
    pub fn param_layout(specs: &[StageSpec; 4]) -> Vec<(String, Vec<usize>)> {
        let mut cin = 3;
        let mut out = Vec::new();
        for s in specs {
            out.push((
                format!("{}.weight", s.name),
                alloc::vec![s.kernel, s.kernel, cin, s.channels],
            ));
            out.push((format!("{}.bias", s.name), alloc::vec![s.channels]));
            cin = s.channels;
        }
        out
    }

    /// Wrap loaded weights, rejecting the first mismatched entry.
    pub fn new(specs: [StageSpec; 4], params: ParamStore<T>) -> Result<Self> {
        Self::validate_specs(&specs)?;
        params.check_layout(&Self::param_layout(&specs))?;
        Ok(Self {
            specs,
            params: params.with_role(ParamRole::Frozen),
        })
    }

    pub fn specs(&self) -> &[StageSpec; 4] {
        &self.specs
    }
}

impl<T: Real> SemanticEncoder<T> for ConvPyramid<T> {
    fn stage_channels(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.specs[i].channels)
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn encode_graph(&self, g: &mut Graph<T>, img: Var) -> Result<[Var; 4]> {
        let s = g.shape(img);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Config(format!(
                "encoder expects [B, 3, H, W], got {s:?}"
            )));
        }
        let (h, w) = (s[2], s[3]);
        if h < MIN_ENCODER_SIDE || w < MIN_ENCODER_SIDE {
            return Err(Error::InputTooSmall {
                height: h,
                width: w,
                min: MIN_ENCODER_SIDE,
            });
        }
        let mut x = g.to_nhwc(img)?;
        let mut out = [x; 4];
        for (i, spec) in self.specs.iter().enumerate() {
            if i > 0 {
                x = g.silu(x);
            }
            let wv = g.constant(self.params.get(&format!("{}.weight", spec.name))?.clone());
            let bv = g.constant(self.params.get(&format!("{}.bias", spec.name))?.clone());
            x = g.conv2d(x, wv, Some(bv), spec.stride, spec.padding())?;
            out[i] = x;
        }
        Ok(out)
    }
}

/// Seeded random pyramid: strides 4, 2, 2, 2 and widths 12, 24, 48, 96.
/// Weights are He-uniform so activations keep their scale across stages.
pub fn build_test_encoder<T: Real>(seed: u64) -> ConvPyramid<T> {
    let specs = test_specs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new(ParamRole::Frozen);
    for (name, shape) in ConvPyramid::<T>::param_layout(&specs) {
        let t = if shape.len() == 4 {
            let fan_in = shape[0] * shape[1] * shape[2];
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).unwrap();
            Tensor::from_fn(&shape, |_| T::from_f64(dist.sample(&mut rng)))
        } else {
            let dist = Uniform::new_inclusive(-0.1, 0.1).unwrap();
            Tensor::from_fn(&shape, |_| T::from_f64(dist.sample(&mut rng)))
        };
        params.insert(name, t);
    }
    ConvPyramid::new(specs, params).expect("test encoder layout is consistent")
}
