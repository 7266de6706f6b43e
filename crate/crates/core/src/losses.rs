//! Training objectives.
//!
//! Graph functions take and return [`Var`]s so they compose into a single
//! backward pass; the `*_value` helpers evaluate the same formulas on plain
//! tensors. Reference operands (teacher outputs, ground-truth features,
//! positive and negative embeddings) are detached inside each loss.

use alloc::format;
use alloc::vec;

use crate::error::{shape_mismatch, Error, Result};
use crate::graph::{Graph, Var};
use crate::image::ImageTensor;
use crate::real::{lit, Real};
use crate::tensor::Tensor;

/// Denominator guard of the contrastive ratio.
pub const SCR_EPS: f64 = 1e-8;

/// Which distance ratio the contrastive loss uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScrForm {
    /// `omega * d(anchor, positive) / (d(anchor, negative) + eps)`.
    #[default]
    AnchorRatio,
    /// `omega * (d(anchor, negative) + eps) / (d(positive, negative) + eps)`,
    /// so equal distances give exactly `omega` even when both are zero.
    Literal,
}

impl core::str::FromStr for ScrForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor_ratio" => Ok(Self::AnchorRatio),
            "literal" => Ok(Self::Literal),
            _ => Err(Error::Config(format!(
                "unknown scr form `{s}` (anchor_ratio | literal)"
            ))),
        }
    }
}

impl core::fmt::Display for ScrForm {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Self::AnchorRatio => "anchor_ratio",
            Self::Literal => "literal",
        })
    }
}

/// Loss weights and the warm-up horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSchedule {
    /// Weight of the perceptual term in the supervised objective.
    pub gamma1: f64,
    /// Weight of the gradient term in the supervised objective.
    pub gamma2: f64,
    /// Weight of the adversarial term in the overall objective.
    pub lambda2: f64,
    /// Contrastive weight.
    pub omega: f64,
    pub total_epochs: u32,
    pub scr_form: ScrForm,
}

impl Default for LossSchedule {
    fn default() -> Self {
        Self {
            gamma1: 0.1,
            gamma2: 0.1,
            lambda2: 0.1,
            omega: 1.0,
            total_epochs: 200,
            scr_form: ScrForm::AnchorRatio,
        }
    }
}

impl LossSchedule {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.gamma1, self.gamma2, self.lambda2, self.omega];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0: {weights:?}"
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// Unsupervised weight `0.2 * exp(-5 (1 - t/T)^2)` at epoch `t`.
    pub fn lambda1(&self, epoch: u32) -> f64 {
        warmup_lambda1(epoch, self.total_epochs)
    }
}

/// `0.2 * exp(-5 (1 - t/T)^2)`, with `t` clamped to `[0, T]`.
pub fn warmup_lambda1(epoch: u32, total_epochs: u32) -> f64 {
    let t = epoch.min(total_epochs) as f64 / total_epochs.max(1) as f64;
    let r = 1.0 - t;
    0.2 * num_traits::Float::exp(-5.0 * r * r)
}

/// `l_sup + (gamma1 * l_per + gamma2 * l_grad)`.
pub fn supervised_objective(l_sup: f64, l_per: f64, l_grad: f64, s: &LossSchedule) -> f64 {
    l_sup + (s.gamma1 * l_per + s.gamma2 * l_grad)
}

/// `l_con + l_scr`.
pub fn unsupervised_objective(l_con: f64, l_scr: f64) -> f64 {
    l_con + l_scr
}

/// `l_sup' + (lambda1(t) * l_un' + lambda2 * l_adv)`.
pub fn overall_objective(l_sup: f64, l_un: f64, l_adv: f64, epoch: u32, s: &LossSchedule) -> f64 {
    l_sup + (s.lambda1(epoch) * l_un + s.lambda2 * l_adv)
}

fn check_same<T: Real>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(shape_mismatch(op, g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// Mean absolute error between prediction and ground truth.
pub fn fidelity<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    check_same(g, "fidelity_loss", pred, gt)?;
    let gt = g.detach(gt);
    g.l1_mean(pred, gt)
}

/// Mean absolute error to a detached teacher output.
pub fn consistency<T: Real>(g: &mut Graph<T>, student: Var, teacher: Var) -> Result<Var> {
    check_same(g, "consistency_loss", student, teacher)?;
    let teacher = g.detach(teacher);
    g.l1_mean(student, teacher)
}

/// Contrastive ratio on `[B, D]` embeddings; gradients reach the anchor only.
pub fn scr<T: Real>(
    g: &mut Graph<T>,
    anchor: Var,
    positive: Var,
    negative: Var,
    omega: f64,
    form: ScrForm,
) -> Result<Var> {
    check_same(g, "scr_loss", anchor, positive)?;
    check_same(g, "scr_loss", anchor, negative)?;
    let positive = g.detach(positive);
    let negative = g.detach(negative);
    let (num, den) = match form {
        ScrForm::AnchorRatio => (g.l1_mean(anchor, positive)?, g.l1_mean(anchor, negative)?),
        ScrForm::Literal => {
            let num = g.l1_mean(anchor, negative)?;
            (
                g.add_scalar(num, lit(SCR_EPS)),
                g.l1_mean(positive, negative)?,
            )
        }
    };
    let den = g.add_scalar(den, lit(SCR_EPS));
    let ratio = g.div(num, den)?;
    Ok(g.scale(ratio, lit(omega)))
}

/// Mean over stages 2..=4 of the per-stage mean squared feature distance.
/// Ground-truth features are detached.
pub fn perceptual<T: Real>(g: &mut Graph<T>, gt: &[Var; 4], enh: &[Var; 4]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for i in 1..4 {
        check_same(g, "perceptual_loss", gt[i], enh[i])?;
        let target = g.detach(gt[i]);
        let d = g.mse(enh[i], target)?;
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    Ok(g.scale(total.unwrap(), lit(1.0 / 3.0)))
}

fn luminance_diffs<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize, alloc::vec::Vec<T>)> {
    let &[b, 3, h, w] = x.shape() else {
        return Err(Error::Config(format!(
            "gradient map expects [B, 3, H, W], got {:?}",
            x.shape()
        )));
    };
    let third = lit::<T>(1.0 / 3.0);
    let plane = h * w;
    let mut lum = vec![T::zero(); b * plane];
    for bi in 0..b {
        let base = bi * 3 * plane;
        for i in 0..plane {
            let d = x.data();
            lum[bi * plane + i] =
                (d[base + i] + d[base + plane + i] + d[base + 2 * plane + i]) * third;
        }
    }
    // signed forward differences, [B, 2, H, W]
    let mut diff = vec![T::zero(); b * 2 * plane];
    for bi in 0..b {
        let l = &lum[bi * plane..(bi + 1) * plane];
        let (dx, dy) = diff[bi * 2 * plane..(bi + 1) * 2 * plane].split_at_mut(plane);
        for y in 0..h {
            for xi in 0..w {
                let i = y * w + xi;
                if xi + 1 < w {
                    dx[i] = l[i + 1] - l[i];
                }
                if y + 1 < h {
                    dy[i] = l[i + w] - l[i];
                }
            }
        }
    }
    Ok((b, h, w, diff))
}

/// Absolute forward differences of the channel-mean luminance:
/// channel 0 horizontal (last column 0), channel 1 vertical (last row 0).
pub fn gradient_map_graph<T: Real>(g: &mut Graph<T>, img: Var) -> Result<Var> {
    let (b, h, w, diff) = luminance_diffs(g.value(img))?;
    let out = Tensor::from_vec(&[b, 2, h, w], diff.iter().map(|v| v.abs()).collect())?;
    Ok(g.push_op(out, &[img], move |go, _, _| {
        let plane = h * w;
        let third = lit::<T>(1.0 / 3.0);
        let mut glum = vec![T::zero(); b * plane];
        for bi in 0..b {
            let gl = &mut glum[bi * plane..(bi + 1) * plane];
            let base = bi * 2 * plane;
            for y in 0..h {
                for xi in 0..w {
                    let i = y * w + xi;
                    let sx = diff[base + i].signum_zero() * go.data()[base + i];
                    if xi + 1 < w {
                        gl[i + 1] += sx;
                        gl[i] -= sx;
                    }
                    let sy = diff[base + plane + i].signum_zero() * go.data()[base + plane + i];
                    if y + 1 < h {
                        gl[i + w] += sy;
                        gl[i] -= sy;
                    }
                }
            }
        }
        let mut gi = vec![T::zero(); b * 3 * plane];
        for bi in 0..b {
            for c in 0..3 {
                for i in 0..plane {
                    gi[(bi * 3 + c) * plane + i] = glum[bi * plane + i] * third;
                }
            }
        }
        vec![Some(Tensor::from_vec(&[b, 3, h, w], gi).unwrap())]
    }))
}

trait SignumZero {
    fn signum_zero(self) -> Self;
}

impl<T: Real> SignumZero for T {
    #[inline]
    fn signum_zero(self) -> T {
        if self > T::zero() {
            T::one()
        } else if self < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    }
}

/// Mean absolute difference between gradient maps; `gt` is detached.
pub fn gradient<T: Real>(g: &mut Graph<T>, enh: Var, gt: Var) -> Result<Var> {
    check_same(g, "gradient_loss", enh, gt)?;
    let gt = g.detach(gt);
    let a = gradient_map_graph(g, enh)?;
    let b = gradient_map_graph(g, gt)?;
    g.l1_mean(a, b)
}

/// Graph form of [`supervised_objective`].
pub fn supervised_graph<T: Real>(
    g: &mut Graph<T>,
    l_sup: Var,
    l_per: Var,
    l_grad: Var,
    s: &LossSchedule,
) -> Result<Var> {
    weighted(g, l_sup, &[(l_per, s.gamma1), (l_grad, s.gamma2)])
}

/// Graph form of [`overall_objective`]; `None` terms are absent (zero).
pub fn overall_graph<T: Real>(
    g: &mut Graph<T>,
    l_sup: Var,
    l_un: Option<Var>,
    l_adv: Option<Var>,
    epoch: u32,
    s: &LossSchedule,
) -> Result<Var> {
    let mut terms = alloc::vec::Vec::new();
    if let Some(u) = l_un {
        terms.push((u, s.lambda1(epoch)));
    }
    if let Some(a) = l_adv {
        terms.push((a, s.lambda2));
    }
    weighted(g, l_sup, &terms)
}

/// `base + (w1 * t1 + w2 * t2 + ...)`, grouped like the scalar helpers.
fn weighted<T: Real>(g: &mut Graph<T>, base: Var, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let s = g.scale(v, lit(w));
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    match acc {
        Some(a) => g.add(base, a),
        None => Ok(base),
    }
}

fn eval2<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(&mut Graph<T>, Var, Var) -> Result<Var>,
) -> Result<T> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = f(&mut g, va, vb)?;
    Ok(g.value(out).item())
}

pub fn fidelity_loss<T: Real>(pred: &ImageTensor<T>, gt: &ImageTensor<T>) -> Result<T> {
    eval2(pred.tensor(), gt.tensor(), fidelity)
}

pub fn consistency_loss<T: Real>(student: &ImageTensor<T>, teacher: &ImageTensor<T>) -> Result<T> {
    eval2(student.tensor(), teacher.tensor(), consistency)
}

pub fn gradient_loss<T: Real>(enh: &ImageTensor<T>, gt: &ImageTensor<T>) -> Result<T> {
    eval2(enh.tensor(), gt.tensor(), gradient)
}

pub fn gradient_map<T: Real>(img: &ImageTensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let x = g.constant(img.tensor().clone());
    let m = gradient_map_graph(&mut g, x).expect("image tensors are [B, 3, H, W]");
    g.value(m).clone()
}

pub fn scr_loss<T: Real>(
    anchor: &crate::encoder::SemanticEmbedding<T>,
    positive: &crate::encoder::SemanticEmbedding<T>,
    negative: &crate::encoder::SemanticEmbedding<T>,
    omega: f64,
    form: ScrForm,
) -> Result<T> {
    let mut g = Graph::new();
    let a = g.constant(anchor.tensor().clone());
    let p = g.constant(positive.tensor().clone());
    let n = g.constant(negative.tensor().clone());
    let out = scr(&mut g, a, p, n, omega, form)?;
    Ok(g.value(out).item())
}

pub fn perceptual_loss<T: Real>(
    gt: &crate::encoder::FeaturePyramid<T>,
    enh: &crate::encoder::FeaturePyramid<T>,
) -> Result<T> {
    let mut g = Graph::new();
    let a = gt.stages().clone().map(|t| g.constant(t));
    let b = enh.stages().clone().map(|t| g.constant(t));
    let out = perceptual(&mut g, &a, &b)?;
    Ok(g.value(out).item())
}
