//! Low-light synthesis, paired crop/rotation and seeded batch assembly.
//!
//! A batch is a pure function of the sample source, the plan and the step
//! index, so batches can be built ahead of time in any order.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{self, ImageTensor};
use crate::mean_teacher::{strong_augment, weak_augment, AugmentationPolicy, RandomDraw};
use crate::real::{lit, Real};
use crate::tensor::Tensor;

/// Ranges of the synthetic darkening parameters.
pub const SCALE_RANGE: (f64, f64) = (0.4, 0.9);
pub const GAMMA_RANGE: (f64, f64) = (2.0, 3.5);
pub const NOISE_SIGMA_RANGE: (f64, f64) = (0.0, 0.02);

/// Parameters of one synthetic darkening `clip((scale * img)^gamma + noise)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowLightDraw {
    pub scale: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl LowLightDraw {
    /// Leaves images unchanged.
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            gamma: rng.random_range(GAMMA_RANGE.0..=GAMMA_RANGE.1),
            noise_sigma: rng.random_range(NOISE_SIGMA_RANGE.0..=NOISE_SIGMA_RANGE.1),
            noise_seed: rng.random(),
        }
    }
}

/// Darken an image with the given draw. Noise is drawn from a generator
/// seeded by `draw.noise_seed`.
pub fn synthesize_lowlight<T: Real>(
    img: &ImageTensor<T>,
    draw: &LowLightDraw,
) -> Result<ImageTensor<T>> {
    if !(draw.scale > 0.0 && draw.gamma > 0.0 && draw.noise_sigma >= 0.0) {
        return Err(Error::Config(format!("invalid low-light draw {draw:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(draw.noise_seed);
    let noise = Normal::new(0.0, draw.noise_sigma).map_err(|e| Error::Config(format!("{e}")))?;
    let shape = img.tensor().shape();
    let data = img.tensor().data();
    let out = Tensor::from_fn(shape, |i| {
        let base = num_traits::Float::powf((draw.scale * data[i].to_f64()).max(0.0), draw.gamma);
        let n = if draw.noise_sigma > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        T::from_f64((base + n).clamp(0.0, 1.0))
    });
    ImageTensor::new(out)
}

/// Crop offset and quarter-turn count shared by a low/gt pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropDraw {
    pub y: usize,
    pub x: usize,
    pub quarter_turns: usize,
}

/// Identical square crop and rotation of a pixel-aligned pair. Sources
/// smaller than `crop` are first resized up; the returned flag reports it.
pub fn paired_crop<T: Real, R: Rng + ?Sized>(
    low: &ImageTensor<T>,
    gt: &ImageTensor<T>,
    crop: usize,
    rng: &mut R,
) -> Result<(ImageTensor<T>, ImageTensor<T>, CropDraw, bool)> {
    if low.tensor().shape() != gt.tensor().shape() {
        return Err(crate::error::shape_mismatch(
            "paired_crop",
            low.tensor().shape(),
            gt.tensor().shape(),
        ));
    }
    let (h, w) = (low.height(), low.width());
    let upscaled = h < crop || w < crop;
    let (low, gt) = if upscaled {
        let (nh, nw) = (h.max(crop), w.max(crop));
        (
            image::resize_bilinear(low, nh, nw)?,
            image::resize_bilinear(gt, nh, nw)?,
        )
    } else {
        (low.clone(), gt.clone())
    };
    let draw = CropDraw {
        y: rng.random_range(0..=low.height() - crop),
        x: rng.random_range(0..=low.width() - crop),
        quarter_turns: rng.random_range(0..4),
    };
    let apply = |img: &ImageTensor<T>| -> Result<ImageTensor<T>> {
        Ok(image::rot90(
            &image::crop(img, draw.y, draw.x, crop, crop)?,
            draw.quarter_turns,
        ))
    };
    Ok((apply(&low)?, apply(&gt)?, draw, upscaled))
}

/// Random access to training images, each `[1, 3, H, W]` in `[0, 1]`.
pub trait SampleSource<T: Real> {
    fn paired_len(&self) -> usize;
    fn unpaired_len(&self) -> usize;
    /// `(low, gt)` of paired sample `i`.
    fn paired(&self, i: usize) -> Result<(ImageTensor<T>, ImageTensor<T>)>;
    fn unpaired(&self, i: usize) -> Result<ImageTensor<T>>;
}

/// Images held in memory.
#[derive(Clone, Debug, Default)]
pub struct InMemorySource<T> {
    pub paired: Vec<(ImageTensor<T>, ImageTensor<T>)>,
    pub unpaired: Vec<ImageTensor<T>>,
}

impl<T: Real> SampleSource<T> for InMemorySource<T> {
    fn paired_len(&self) -> usize {
        self.paired.len()
    }

    fn unpaired_len(&self) -> usize {
        self.unpaired.len()
    }

    fn paired(&self, i: usize) -> Result<(ImageTensor<T>, ImageTensor<T>)> {
        self.paired
            .get(i)
            .cloned()
            .ok_or_else(|| Error::Precondition(format!("paired index {i} out of range")))
    }

    fn unpaired(&self, i: usize) -> Result<ImageTensor<T>> {
        self.unpaired
            .get(i)
            .cloned()
            .ok_or_else(|| Error::Precondition(format!("unpaired index {i} out of range")))
    }
}

/// Which samples each step draws. Paired samples are shuffled without
/// replacement per epoch; unpaired samples cycle through their list. An
/// `unpaired_len` of 0 ignores the source's unpaired images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub paired_len: usize,
    pub unpaired_len: usize,
    pub paired_per_batch: usize,
    pub unpaired_per_batch: usize,
    pub seed: u64,
}

const SHUFFLE_SALT: u64 = 0x5348_5546;
const CROP_SALT: u64 = 0x4352_4f50;
const STRONG_SALT: u64 = 0x5354_524f;

/// Independent generator for `(seed, salt, a, b)`.
pub(crate) fn keyed_rng(seed: u64, salt: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.rotate_left(17) ^ a.rotate_left(41));
    rng.set_stream(b);
    rng
}

impl BatchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.paired_len == 0 || self.paired_per_batch == 0 {
            return Err(Error::Config(
                "training needs at least one paired sample per batch".into(),
            ));
        }
        Ok(())
    }

    /// Batches per epoch; the last one may be partial.
    pub fn steps_per_epoch(&self) -> usize {
        self.paired_len.div_ceil(self.paired_per_batch)
    }

    pub fn epoch_of(&self, step: u64) -> u64 {
        step / self.steps_per_epoch() as u64
    }

    /// Sample order of one epoch.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.paired_len).collect();
        order.shuffle(&mut keyed_rng(self.seed, SHUFFLE_SALT, epoch, 0));
        order
    }

    pub fn paired_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch() as u64;
        let j = (step % spe) as usize * self.paired_per_batch;
        let order = self.epoch_order(step / spe);
        order[j..(j + self.paired_per_batch).min(self.paired_len)].to_vec()
    }

    /// Empty when there is no unpaired data.
    pub fn unpaired_indices(&self, step: u64) -> Vec<usize> {
        if self.unpaired_len == 0 {
            return Vec::new();
        }
        let start = step as usize * self.unpaired_per_batch;
        (start..start + self.unpaired_per_batch)
            .map(|i| i % self.unpaired_len)
            .collect()
    }
}

/// Inputs of one training step, all `[B, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch<T> {
    pub step: u64,
    pub paired_low: ImageTensor<T>,
    pub paired_gt: ImageTensor<T>,
    /// Weak and strong views of the same unpaired sources, when present.
    pub unpaired_weak: Option<ImageTensor<T>>,
    pub unpaired_strong: Option<ImageTensor<T>>,
    pub paired_ids: Vec<usize>,
    pub unpaired_ids: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Build the batch of `step`. `policy` carries the unpaired view size and
/// the strong-pipeline magnitudes; its seed is replaced by `plan.seed`.
pub fn make_batch<T: Real>(
    source: &dyn SampleSource<T>,
    plan: &BatchPlan,
    crop: usize,
    policy: &AugmentationPolicy,
    step: u64,
) -> Result<TrainBatch<T>> {
    plan.validate()?;
    let unpaired_ok = plan.unpaired_len == 0 || plan.unpaired_len == source.unpaired_len();
    if plan.paired_len != source.paired_len() || !unpaired_ok {
        return Err(Error::Config(format!(
            "plan expects {}+{} samples, source has {}+{}",
            plan.paired_len,
            plan.unpaired_len,
            source.paired_len(),
            source.unpaired_len()
        )));
    }
    let mut warnings = Vec::new();
    let paired_ids = plan.paired_indices(step);
    let (mut lows, mut gts) = (Vec::new(), Vec::new());
    for (slot, &i) in paired_ids.iter().enumerate() {
        let (low, gt) = source.paired(i)?;
        let mut rng = keyed_rng(plan.seed, CROP_SALT, step, slot as u64);
        let (l, g, _, upscaled) = paired_crop(&low, &gt, crop, &mut rng)?;
        if upscaled {
            warnings.push(format!(
                "paired sample {i} is {}x{}, resized up to crop {crop}",
                low.height(),
                low.width()
            ));
        }
        lows.push(l);
        gts.push(g);
    }
    let policy = AugmentationPolicy {
        seed: plan.seed ^ STRONG_SALT,
        ..policy.clone()
    };
    let unpaired_ids = plan.unpaired_indices(step);
    let (mut weak, mut strong) = (Vec::new(), Vec::new());
    for (slot, &i) in unpaired_ids.iter().enumerate() {
        let img = source.unpaired(i)?;
        let draw = RandomDraw::for_index(&policy, step, slot as u64);
        weak.push(weak_augment(&img, &policy)?);
        strong.push(strong_augment(&img, &policy, &draw)?);
    }
    let (unpaired_weak, unpaired_strong) = if weak.is_empty() {
        (None, None)
    } else {
        (
            Some(ImageTensor::stack(&weak)?),
            Some(ImageTensor::stack(&strong)?),
        )
    };
    Ok(TrainBatch {
        step,
        paired_low: ImageTensor::stack(&lows)?,
        paired_gt: ImageTensor::stack(&gts)?,
        unpaired_weak,
        unpaired_strong,
        paired_ids,
        unpaired_ids,
        warnings,
    })
}

/// Seeded synthetic images: smooth color gradients with a few bright
/// rectangles, useful as ground truth for darkening.
pub fn synthetic_scene<T: Real>(seed: u64, h: usize, w: usize) -> ImageTensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [[f64; 3]; 3] =
        core::array::from_fn(|_| core::array::from_fn(|_| rng.random_range(0.2..0.8)));
    let rects: Vec<(usize, usize, usize, usize, [f64; 3])> = (0..3)
        .map(|_| {
            let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
            let (rh, rw) = (
                rng.random_range(1..=h / 2 + 1),
                rng.random_range(1..=w / 2 + 1),
            );
            (
                y0,
                x0,
                rh,
                rw,
                core::array::from_fn(|_| rng.random_range(0.0..1.0)),
            )
        })
        .collect();
    ImageTensor::from_fn(1, h, w, |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
        let mut v = base[0][c] + (base[1][c] - 0.5) * fy + (base[2][c] - 0.5) * fx;
        for &(y0, x0, rh, rw, col) in &rects {
            if (y0..y0 + rh).contains(&y) && (x0..x0 + rw).contains(&x) {
                v = 0.5 * v + 0.5 * col[c];
            }
        }
        lit::<T>(v.clamp(0.0, 1.0))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_order_is_a_permutation() {
        let plan = BatchPlan {
            paired_len: 10,
            unpaired_len: 3,
            paired_per_batch: 4,
            unpaired_per_batch: 2,
            seed: 1,
        };
        let mut o = plan.epoch_order(2);
        o.sort_unstable();
        assert_eq!(o, (0..10).collect::<Vec<_>>());
        assert_eq!(plan.steps_per_epoch(), 3);
        assert_eq!(plan.paired_indices(2).len(), 2);
        assert_eq!(plan.unpaired_indices(1), [2, 0]);
    }
}
