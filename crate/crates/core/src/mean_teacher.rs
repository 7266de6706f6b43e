//! Student/teacher parameter pairs, EMA aggregation, and the weak and strong
//! augmentation pipelines feeding the two models.

use alloc::format;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{self, ImageTensor};
use crate::params::{ParamRole, ParamStore};
use crate::real::{lit, Real};

/// Default EMA momentum.
pub const DEFAULT_BETA: f64 = 0.999;

/// A student collection and its exponential moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair<T> {
    student: ParamStore<T>,
    teacher: ParamStore<T>,
    beta: f64,
}

/// Summary of one [`ModelPair::ema_update`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaStats {
    /// Largest absolute change of any teacher entry.
    pub max_change: f64,
    /// Every new teacher entry lies between its old value and the student's.
    pub convex: bool,
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!(
            "EMA momentum must lie in [0, 1], got {beta}"
        )));
    }
    Ok(())
}

impl<T: Real> ModelPair<T> {
    /// Teacher starts as an exact copy of the student.
    pub fn new(student: ParamStore<T>, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        let teacher = student.with_role(ParamRole::Teacher);
        Ok(Self {
            student: student.with_role(ParamRole::Student),
            teacher,
            beta,
        })
    }

    /// Rebuild a pair from saved collections.
    pub fn from_parts(student: ParamStore<T>, teacher: ParamStore<T>, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        student.check_congruent(&teacher)?;
        Ok(Self {
            student: student.with_role(ParamRole::Student),
            teacher: teacher.with_role(ParamRole::Teacher),
            beta,
        })
    }

    pub fn student(&self) -> &ParamStore<T> {
        &self.student
    }

    /// Mutable student, for the optimizer. The teacher has no mutable accessor.
    pub fn student_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.student
    }

    pub fn teacher(&self) -> &ParamStore<T> {
        &self.teacher
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn into_parts(self) -> (ParamStore<T>, ParamStore<T>) {
        (self.student, self.teacher)
    }

    /// `teacher <- beta * teacher + (1 - beta) * student`, entrywise.
    ///
    /// Evaluated as `t + (1 - beta) * (s - t)`, which keeps every result
    /// between `t` and `s` under rounding and makes `s == t` a fixed point.
    /// `beta == 1` leaves the teacher untouched and `beta == 0` copies the
    /// student.
    pub fn ema_update(&mut self) -> Result<EmaStats> {
        self.student.check_congruent(&self.teacher)?;
        let c = lit::<T>(1.0 - self.beta);
        let mut stats = EmaStats {
            max_change: 0.0,
            convex: true,
        };
        for ((_, t), (_, s)) in self.teacher.iter_mut().zip(self.student.iter()) {
            for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                let old = *tv;
                let new = if self.beta == 0.0 {
                    sv
                } else {
                    old + c * (sv - old)
                };
                let (lo, hi) = if old <= sv { (old, sv) } else { (sv, old) };
                stats.convex &= lo <= new && new <= hi;
                stats.max_change = stats.max_change.max((new - old).abs().to_f64());
                *tv = new;
            }
        }
        Ok(stats)
    }
}

/// Magnitudes of the two augmentation pipelines.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPolicy {
    /// Target `(height, width)` of both pipelines.
    pub resize_to: (usize, usize),
    pub blur_kernel: usize,
    /// Range of the Gaussian blur sigma.
    pub blur_sigma: (f64, f64),
    pub grayscale_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Maximum hue rotation in turns.
    pub hue: f64,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            resize_to: (256, 256),
            blur_kernel: 5,
            blur_sigma: (0.1, 2.0),
            grayscale_prob: 0.2,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    /// A policy whose strong pipeline reduces to the weak one.
    pub fn resize_only(resize_to: (usize, usize)) -> Self {
        Self {
            resize_to,
            blur_sigma: (0.0, 0.0),
            grayscale_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.blur_sigma;
        let ok = self.resize_to.0 > 0
            && self.resize_to.1 > 0
            && (0.0..=1.0).contains(&self.grayscale_prob)
            && lo >= 0.0
            && lo <= hi
            && hi.is_finite()
            && [self.brightness, self.contrast, self.saturation]
                .iter()
                .all(|m| (0.0..=1.0).contains(m))
            && (0.0..=0.5).contains(&self.hue)
            && self.blur_kernel % 2 == 1;
        if !ok {
            return Err(Error::Config(format!(
                "invalid augmentation policy {self:?}"
            )));
        }
        Ok(())
    }
}

/// One sample of the strong pipeline's random choices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandomDraw {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale: bool,
    pub blur_sigma: f64,
}

impl RandomDraw {
    /// Factors uniform in `[1 - m, 1 + m]`, hue in `[-hue, hue]`.
    pub fn sample<R: Rng + ?Sized>(policy: &AugmentationPolicy, rng: &mut R) -> Self {
        let mut around = |center: f64, m: f64| {
            if m > 0.0 {
                rng.random_range(center - m..=center + m)
            } else {
                center
            }
        };
        let brightness = around(1.0, policy.brightness);
        let contrast = around(1.0, policy.contrast);
        let saturation = around(1.0, policy.saturation);
        let hue = around(0.0, policy.hue);
        let grayscale = policy.grayscale_prob > 0.0 && rng.random_bool(policy.grayscale_prob);
        let (lo, hi) = policy.blur_sigma;
        let blur_sigma = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        Self {
            brightness,
            contrast,
            saturation,
            hue,
            grayscale,
            blur_sigma,
        }
    }

    /// Draw `index` of the stream seeded by `policy.seed` and `stream`.
    pub fn for_index(policy: &AugmentationPolicy, stream: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(policy.seed ^ stream.rotate_left(32));
        rng.set_stream(index);
        Self::sample(policy, &mut rng)
    }
}

/// Bilinear resize to the policy target, nothing else.
pub fn weak_augment<T: Real>(
    img: &ImageTensor<T>,
    policy: &AugmentationPolicy,
) -> Result<ImageTensor<T>> {
    let (h, w) = policy.resize_to;
    image::resize_bilinear(img, h, w)
}

/// Resize, then color jitter, optional grayscale and Gaussian blur, then
/// clip to `[0, 1]`. The same draw is applied to every image in the batch.
pub fn strong_augment<T: Real>(
    img: &ImageTensor<T>,
    policy: &AugmentationPolicy,
    draw: &RandomDraw,
) -> Result<ImageTensor<T>> {
    let mut x = weak_augment(img, policy)?;
    if draw.brightness != 1.0 {
        x = image::adjust_brightness(&x, lit(draw.brightness));
    }
    if draw.contrast != 1.0 {
        x = image::adjust_contrast(&x, lit(draw.contrast));
    }
    if draw.saturation != 1.0 {
        x = image::adjust_saturation(&x, lit(draw.saturation));
    }
    if draw.hue != 0.0 {
        x = image::adjust_hue(&x, lit(draw.hue));
    }
    if draw.grayscale {
        x = image::to_grayscale(&x);
    }
    x = image::gaussian_blur(&x, policy.blur_kernel, draw.blur_sigma);
    Ok(x.clamp01())
}

/// Teacher output on the weakly augmented image. `teacher_forward` must not
/// record gradients or touch parameters.
pub fn pseudo_label<T: Real, F>(
    teacher_forward: F,
    unpaired: &ImageTensor<T>,
    policy: &AugmentationPolicy,
) -> Result<ImageTensor<T>>
where
    F: FnOnce(&ImageTensor<T>) -> Result<ImageTensor<T>>,
{
    let weak = weak_augment(unpaired, policy)?;
    let out = teacher_forward(&weak)?;
    if out.tensor().shape() != weak.tensor().shape() {
        return Err(crate::error::shape_mismatch(
            "pseudo_label",
            out.tensor().shape(),
            weak.tensor().shape(),
        ));
    }
    Ok(out)
}
