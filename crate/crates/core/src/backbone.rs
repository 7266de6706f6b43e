//! Illumination-guided state-space enhancement network.
//!
//! The network estimates an illumination map from the image and its
//! channel-mean brightness, embeds image and map into shallow features,
//! refines them with cascaded groups of state-space blocks and predicts a
//! residual that is added back to the input image.
//!
//! Features are channels-last `[B, H, W, C]` internally; images enter and
//! leave as `[B, 3, H, W]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::ImageTensor;
use crate::ops::layout::{nchw_to_nhwc, nhwc_to_nchw};
use crate::params::{fan_in_uniform, trunc_normal, BoundParams, ParamRole, ParamStore};
use crate::real::{lit, Real};
use crate::ssm::{ScanDirections, SsmParams, SsmVars, SSM_PARAM_NAMES};
use crate::tensor::Tensor;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

const LN_EPS: f64 = 1e-5;
const LINEAR_STD: f64 = 0.02;
const FFN_EXPANSION: usize = 2;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub width: usize,
    pub n_groups: usize,
    pub n_blocks: usize,
    /// Channel expansion of the state-space branch.
    pub expansion: f64,
    pub dw_kernels: [usize; 2],
    pub n_state: usize,
    /// Reduction ratio of the channel-attention bottleneck.
    pub ca_reduction: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            n_groups: 2,
            n_blocks: 2,
            expansion: 2.0,
            dw_kernels: [3, 5],
            n_state: 16,
            ca_reduction: 4,
        }
    }
}

impl BackboneConfig {
    /// Default layout at a different feature width.
    pub fn with_width(width: usize) -> Self {
        Self {
            width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.n_groups == 0 || self.n_blocks == 0 || self.n_state == 0 {
            return bad(format!(
                "width, groups, blocks and state size must be positive: {self:?}"
            ));
        }
        if self.ca_reduction == 0 || FFN_EXPANSION * self.width < self.ca_reduction {
            return bad(format!(
                "channel-attention reduction {} does not fit {} hidden channels",
                self.ca_reduction,
                FFN_EXPANSION * self.width
            ));
        }
        let inner = self.expansion * self.width as f64;
        if !(self.expansion > 0.0) || inner.fract() != 0.0 {
            return bad(format!(
                "expansion {} times width {} is not a positive integer",
                self.expansion, self.width
            ));
        }
        for k in self.dw_kernels {
            if k % 2 == 0 {
                return bad(format!("depth-wise kernel size {k} must be odd"));
            }
        }
        Ok(())
    }

    /// Width of each depth-wise branch.
    pub fn inner_width(&self) -> usize {
        (self.expansion * self.width as f64) as usize
    }

    /// Channels of the concatenated branches fed to the scan.
    pub fn scan_width(&self) -> usize {
        2 * self.inner_width()
    }

    fn ffn_width(&self) -> usize {
        FFN_EXPANSION * self.width
    }

    fn ca_width(&self) -> usize {
        self.ffn_width() / self.ca_reduction
    }

    /// Every parameter name and shape, in a fixed order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        self.param_specs()
            .into_iter()
            .map(|s| (s.name, s.shape))
            .collect()
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    fn param_specs(&self) -> Vec<Spec> {
        let c = self.width;
        let mut s = Specs::default();
        s.linear("iem.pw1", 4, c);
        s.dwconv("iem.dw", 3, c);
        s.linear("iem.pw2", c, 3);
        s.conv("shallow", 3, 6, c);
        for gi in 0..self.n_groups {
            for bi in 0..self.n_blocks {
                let p = format!("groups.{gi}.blocks.{bi}");
                self.block_specs(&mut s, &p);
            }
            s.conv(&format!("groups.{gi}.conv"), 3, c, c);
        }
        s.conv("body_conv", 3, c, c);
        s.push("tail.weight", vec![3, 3, c, 3], Init::Zeros);
        s.push("tail.bias", vec![3], Init::Zeros);
        s.0
    }

    fn block_specs(&self, s: &mut Specs, p: &str) {
        let c = self.width;
        s.norm(&format!("{p}.norm1"), c);
        s.push(format!("{p}.scale1"), vec![c], Init::Ones);
        self.mssm_specs(s, &format!("{p}.mssm"));
        s.norm(&format!("{p}.norm2"), c);
        s.push(format!("{p}.scale2"), vec![c], Init::Ones);
        let f = format!("{p}.ffn");
        s.linear(&format!("{f}.expand"), c, self.ffn_width());
        s.linear(&format!("{f}.ca.down"), self.ffn_width(), self.ca_width());
        s.linear(&format!("{f}.ca.up"), self.ca_width(), self.ffn_width());
        s.linear(&format!("{f}.project"), self.ffn_width(), c);
    }

    fn mssm_specs(&self, s: &mut Specs, p: &str) {
        let (c, inner, scan) = (self.width, self.inner_width(), self.scan_width());
        s.linear(&format!("{p}.in_proj"), c, inner);
        s.dwconv(
            &format!("{p}.dw{}", self.dw_kernels[0]),
            self.dw_kernels[0],
            inner,
        );
        s.dwconv(
            &format!("{p}.dw{}", self.dw_kernels[1]),
            self.dw_kernels[1],
            inner,
        );
        for (i, (name, shape)) in SSM_PARAM_NAMES
            .iter()
            .zip(SsmParams::<f64>::shapes(scan, self.n_state))
            .enumerate()
        {
            let init = if i == 0 { Init::Ssm } else { Init::SsmPart };
            s.push(format!("{p}.ssm.{name}"), shape, init);
        }
        s.norm(&format!("{p}.out_norm"), scan);
        s.linear(&format!("{p}.gate_proj"), c, scan);
        s.linear(&format!("{p}.out_proj"), scan, c);
    }

    /// Distinct kernel names, `dw3`/`dw5` for the defaults.
    fn dw_names(&self) -> [String; 2] {
        self.dw_kernels.map(|k| format!("dw{k}"))
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Linear,
    FanIn(usize),
    /// First tensor of an SSM layer; the whole layer is drawn at once.
    Ssm,
    SsmPart,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Specs(Vec<Spec>);

impl Specs {
    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) {
        self.0.push(Spec {
            name: name.into(),
            shape,
            init,
        });
    }

    fn linear(&mut self, p: &str, cin: usize, cout: usize) {
        self.push(format!("{p}.weight"), vec![cin, cout], Init::Linear);
        self.push(format!("{p}.bias"), vec![cout], Init::Zeros);
    }

    fn conv(&mut self, p: &str, k: usize, cin: usize, cout: usize) {
        self.push(
            format!("{p}.weight"),
            vec![k, k, cin, cout],
            Init::FanIn(k * k * cin),
        );
        self.push(format!("{p}.bias"), vec![cout], Init::Zeros);
    }

    fn dwconv(&mut self, p: &str, k: usize, c: usize) {
        self.push(format!("{p}.weight"), vec![k, k, c], Init::FanIn(k * k));
        self.push(format!("{p}.bias"), vec![c], Init::Zeros);
    }

    fn norm(&mut self, p: &str, c: usize) {
        self.push(format!("{p}.weight"), vec![c], Init::Ones);
        self.push(format!("{p}.bias"), vec![c], Init::Zeros);
    }
}

/// Channel-mean brightness of an image, `[B, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IlluminationPrior<T>(Tensor<T>);

impl<T: Real> IlluminationPrior<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Estimated 3-channel illumination, `[B, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IlluminationMap<T>(Tensor<T>);

impl<T: Real> IlluminationMap<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Per-pixel mean of the three channels.
pub fn illumination_prior<T: Real>(img: &ImageTensor<T>) -> IlluminationPrior<T> {
    let (b, h, w) = (img.batch(), img.height(), img.width());
    let third = lit::<T>(3.0);
    let mut out = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        let (r, g, bl) = (img.plane(bi, 0), img.plane(bi, 1), img.plane(bi, 2));
        out.extend((0..h * w).map(|i| (r[i] + g[i] + bl[i]) / third));
    }
    IlluminationPrior(Tensor::from_vec(&[b, 1, h, w], out).unwrap())
}

/// Illumination map from an image and its brightness prior.
pub fn estimate_illumination<T: Real>(
    img: &ImageTensor<T>,
    prior: &IlluminationPrior<T>,
    cfg: &BackboneConfig,
    params: &ParamStore<T>,
) -> Result<IlluminationMap<T>> {
    let ps = prior.tensor().shape();
    if ps != [img.batch(), 1, img.height(), img.width()] {
        return Err(Error::Config(format!(
            "prior shape {:?} is not aligned with image shape {:?}",
            ps,
            img.tensor().shape()
        )));
    }
    cfg.validate()?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(nchw_to_nhwc(img.tensor()));
    let pr = g.constant(nchw_to_nhwc(prior.tensor()));
    let map = iem(&mut g, &p, x, pr)?;
    Ok(IlluminationMap(nhwc_to_nchw(g.value(map))))
}

fn linear_at<T: Real>(g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.at(name, "weight")?;
    let b = p.at(name, "bias")?;
    g.linear(x, w, Some(b))
}

fn conv_at<T: Real>(g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.at(name, "weight")?;
    let b = p.at(name, "bias")?;
    let k = g.shape(w)[0];
    g.conv2d(x, w, Some(b), 1, k / 2)
}

fn dwconv_at<T: Real>(g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.at(name, "weight")?;
    let b = p.at(name, "bias")?;
    g.dwconv2d(x, w, Some(b))
}

fn norm_at<T: Real>(g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.at(name, "weight")?;
    let b = p.at(name, "bias")?;
    g.layer_norm(x, w, b, lit(LN_EPS))
}

/// Illumination estimation on channels-last image and prior.
fn iem<T: Real>(g: &mut Graph<T>, p: &BoundParams, img: Var, prior: Var) -> Result<Var> {
    let x = g.concat_last(&[img, prior])?;
    let x = linear_at(g, p, "iem.pw1", x)?;
    let x = dwconv_at(g, p, "iem.dw", x)?;
    linear_at(g, p, "iem.pw2", x)
}

fn check_width<T: Real>(g: &Graph<T>, x: Var, cfg: &BackboneConfig) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 4 || s[3] != cfg.width {
        return Err(Error::Config(format!(
            "expected [B, H, W, {}] features, got {:?}",
            cfg.width, s
        )));
    }
    Ok(())
}

/// Multi-scale state-space module on `[B, H, W, C]` features.
///
/// Two depth-wise branches of the expanded input are concatenated, passed
/// through SiLU, the four-direction scan and a layer norm, gated by a SiLU
/// projection of the input and projected back to `C` channels.
pub fn mssm<T: Real>(
    g: &mut Graph<T>,
    cfg: &BackboneConfig,
    p: &BoundParams,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    cfg.validate()?;
    check_width(g, x, cfg)?;
    let mark = g.mark();
    let x0 = linear_at(g, p, &format!("{prefix}.in_proj"), x)?;
    let [n1, n2] = cfg.dw_names();
    let x1 = dwconv_at(g, p, &format!("{prefix}.{n1}"), x0)?;
    let x2 = dwconv_at(g, p, &format!("{prefix}.{n2}"), x0)?;
    let cat = g.concat_last(&[x1, x2])?;
    let act = g.silu(cat);
    let sp = format!("{prefix}.ssm");
    let [a_log, d_skip, w_delta_down, w_delta_up, delta_bias, w_b, w_c] =
        SSM_PARAM_NAMES.map(|n| p.at(&sp, n));
    let vars = SsmVars {
        a_log: a_log?,
        d_skip: d_skip?,
        w_delta_down: w_delta_down?,
        w_delta_up: w_delta_up?,
        delta_bias: delta_bias?,
        w_b: w_b?,
        w_c: w_c?,
    };
    let scanned = g.ssm_layer(act, &vars, ScanDirections::Four)?;
    let scanned = g.collapse(mark, scanned);
    let x3 = norm_at(g, p, &format!("{prefix}.out_norm"), scanned)?;
    let gate = linear_at(g, p, &format!("{prefix}.gate_proj"), x)?;
    let x4 = g.silu(gate);
    let mixed = g.mul(x3, x4)?;
    let out = linear_at(g, p, &format!("{prefix}.out_proj"), mixed)?;
    Ok(g.collapse(mark, out))
}

/// Channel attention: squeeze by global pooling, excite by a sigmoid bottleneck.
fn channel_attention<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let pooled = g.global_avg_pool(x)?;
    let down = linear_at(g, p, &format!("{prefix}.down"), pooled)?;
    let down = g.relu(down);
    let up = linear_at(g, p, &format!("{prefix}.up"), down)?;
    let weights = g.sigmoid(up);
    g.mul_batch_channel(x, weights)
}

/// Block: `y = x*s1 + MSSM(LN(x))`, `z = y*s2 + FFN(LN(y))`.
pub fn mssb<T: Real>(
    g: &mut Graph<T>,
    cfg: &BackboneConfig,
    p: &BoundParams,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    check_width(g, x, cfg)?;
    let mark = g.mark();
    let n1 = norm_at(g, p, &format!("{prefix}.norm1"), x)?;
    let m = mssm(g, cfg, p, &format!("{prefix}.mssm"), n1)?;
    let s1 = g.mul_channel(x, p.at(prefix, "scale1")?)?;
    let y = g.add(s1, m)?;
    let y = g.collapse(mark, y);

    let mark = g.mark();
    let f = format!("{prefix}.ffn");
    let n2 = norm_at(g, p, &format!("{prefix}.norm2"), y)?;
    let h = linear_at(g, p, &format!("{f}.expand"), n2)?;
    let h = g.silu(h);
    let h = channel_attention(g, p, &format!("{f}.ca"), h)?;
    let h = linear_at(g, p, &format!("{f}.project"), h)?;
    let s2 = g.mul_channel(y, p.at(prefix, "scale2")?)?;
    let z = g.add(s2, h)?;
    Ok(g.collapse(mark, z))
}

/// Full network on a `[B, 3, H, W]` image variable; returns the unclamped
/// enhanced image `[B, 3, H, W]`.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &BackboneConfig,
    p: &BoundParams,
    img: Var,
) -> Result<Var> {
    cfg.validate()?;
    let s = g.shape(img);
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Config(format!(
            "expected a [B, 3, H, W] image, got {s:?}"
        )));
    }
    let x = g.to_nhwc(img)?;
    let mark = g.mark();
    let prior = g.mean_last_keep(x);
    let map = iem(g, p, x, prior)?;
    let map = g.collapse(mark, map);
    let cat = g.concat_last(&[x, map])?;
    let shallow = conv_at(g, p, "shallow", cat)?;
    let mut feat = shallow;
    for gi in 0..cfg.n_groups {
        let group_in = feat;
        for bi in 0..cfg.n_blocks {
            feat = mssb(g, cfg, p, &format!("groups.{gi}.blocks.{bi}"), feat)?;
        }
        let mark = g.mark();
        let c = conv_at(g, p, &format!("groups.{gi}.conv"), feat)?;
        let c = g.add(c, group_in)?;
        feat = g.collapse(mark, c);
    }
    let body = conv_at(g, p, "body_conv", feat)?;
    let body = g.add(body, shallow)?;
    let res = conv_at(g, p, "tail", body)?;
    let res = g.to_nchw(res)?;
    g.add(img, res)
}

/// Network parameters together with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    config: BackboneConfig,
    params: ParamStore<T>,
}

impl<T: Real> Backbone<T> {
    /// Seeded initialization: truncated-normal projections, fan-in uniform
    /// convolutions, standard state-space initialization, unit norms and
    /// scales, zero biases and a zero residual head.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(ParamRole::Student);
        for spec in config.param_specs() {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, T::one()),
                Init::Linear => trunc_normal(&spec.shape, LINEAR_STD, &mut rng),
                Init::FanIn(f) => fan_in_uniform(&spec.shape, f, &mut rng),
                Init::Ssm => {
                    let prefix = spec.name.strip_suffix(SSM_PARAM_NAMES[0]).unwrap_or("");
                    let layer = SsmParams::<T>::init(spec.shape[0], spec.shape[1], &mut rng);
                    for (n, t) in SSM_PARAM_NAMES.iter().zip(layer.tensors()) {
                        params.insert(format!("{prefix}{n}"), t.clone());
                    }
                    continue;
                }
                Init::SsmPart => continue,
            };
            params.insert(spec.name, t);
        }
        Ok(Self { config, params })
    }

    /// Wrap loaded parameters after checking names and shapes.
    pub fn from_params(config: BackboneConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config.param_layout())?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.num_elements()
    }

    /// Graph forward with the parameters bound as leaves or constants.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        img: Var,
        trainable: bool,
    ) -> Result<(Var, BoundParams)> {
        let p = self.params.bind(g, trainable);
        let out = forward(g, &self.config, &p, img)?;
        Ok((out, p))
    }

    /// Training-path output, not clamped.
    pub fn enhance_unclamped(&self, img: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(img.tensor().clone());
        let (y, _) = self.forward(&mut g, x, false)?;
        ImageTensor::new(g.value(y).clone())
    }

    /// Inference output clamped to `[0, 1]`.
    pub fn enhance(&self, img: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        Ok(self.enhance_unclamped(img)?.clamp01())
    }

    pub fn estimate_illumination(&self, img: &ImageTensor<T>) -> Result<IlluminationMap<T>> {
        estimate_illumination(img, &illumination_prior(img), &self.config, &self.params)
    }
}

/// `mssm` on a standalone `[B, H, W, C]` tensor.
pub fn mssm_forward<T: Real>(
    x: &Tensor<T>,
    cfg: &BackboneConfig,
    params: &ParamStore<T>,
    prefix: &str,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = mssm(&mut g, cfg, &p, prefix, xv)?;
    Ok(g.value(y).clone())
}

/// `mssb` on a standalone `[B, H, W, C]` tensor.
pub fn mssb_forward<T: Real>(
    x: &Tensor<T>,
    cfg: &BackboneConfig,
    params: &ParamStore<T>,
    prefix: &str,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = mssb(&mut g, cfg, &p, prefix, xv)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_is_valid_and_sized() {
        let cfg = BackboneConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.inner_width(), 128);
        assert_eq!(cfg.scan_width(), 256);
        let n = cfg.param_count();
        assert!((300_000..=690_000).contains(&n), "{n}");
    }

    #[test]
    fn rejects_fractional_expansion_and_even_kernels() {
        let mut cfg = BackboneConfig::with_width(5);
        cfg.expansion = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = BackboneConfig::with_width(8);
        cfg.dw_kernels = [3, 4];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_matches_layout() {
        let cfg = BackboneConfig::with_width(8);
        let net = Backbone::<f32>::init(cfg.clone(), 1).unwrap();
        net.params().check_layout(&cfg.param_layout()).unwrap();
        assert_eq!(net.param_count(), cfg.param_count());
    }

    #[test]
    fn prior_is_channel_mean() {
        let img =
            ImageTensor::<f64>::new(Tensor::from_vec(&[1, 3, 1, 1], vec![1.0, 0.0, 0.5]).unwrap())
                .unwrap();
        assert_eq!(illumination_prior(&img).tensor().item(), 0.5);
    }
}
