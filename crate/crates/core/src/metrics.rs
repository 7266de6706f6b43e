//! Image-quality metrics on `[0, 1]` RGB batches. Each returns the mean over
//! the batch of the per-image value.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_mismatch, Error, Result};
use crate::image::ImageTensor;
use crate::real::Real;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Side of the SSIM window.
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Largest lightness-map side used by [`loe`].
pub const LOE_MAX_SIDE: usize = 50;

/// Which metrics an evaluation computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Psnr,
    Ssim,
    Loe,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Self::Psnr => "psnr",
            Self::Ssim => "ssim",
            Self::Loe => "loe",
        }
    }

    /// LOE compares the enhanced image against the low-light input; the
    /// other metrics compare against ground truth.
    pub fn needs_reference(self) -> bool {
        !matches!(self, Self::Loe)
    }
}

impl core::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "psnr" => Ok(Self::Psnr),
            "ssim" => Ok(Self::Ssim),
            "loe" => Ok(Self::Loe),
            other => Err(Error::Config(format!(
                "unknown metric `{other}` (psnr | ssim | loe)"
            ))),
        }
    }
}

fn check_pair<T: Real>(op: &'static str, a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(shape_mismatch(op, a.tensor().shape(), b.tensor().shape()));
    }
    Ok(())
}

fn per_image<T: Real>(
    a: &ImageTensor<T>,
    b: &ImageTensor<T>,
    f: impl Fn(&[T], &[T], usize, usize) -> f64,
) -> f64 {
    let (h, w) = (a.height(), a.width());
    let n = 3 * h * w;
    let total: f64 = a
        .tensor()
        .data()
        .chunks_exact(n)
        .zip(b.tensor().data().chunks_exact(n))
        .map(|(x, y)| f(x, y, h, w))
        .sum();
    total / a.batch() as f64
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    check_pair("psnr", a, b)?;
    Ok(per_image(a, b, |x, y, _, _| {
        let mse = x
            .iter()
            .zip(y)
            .map(|(&p, &q)| {
                let d = p.to_f64() - q.to_f64();
                d * d
            })
            .sum::<f64>()
            / x.len() as f64;
        if mse == 0.0 {
            PSNR_CAP
        } else {
            (10.0 * num_traits::Float::log10(1.0 / mse)).min(PSNR_CAP)
        }
    }))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = num_traits::Float::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|t| k[t] * src[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|t| k[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels and valid window positions, with an 11x11
/// Gaussian window (sigma 1.5) and the standard constants for unit range.
pub fn ssim<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    check_pair("ssim", a, b)?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::InputTooSmall {
            height: a.height(),
            width: a.width(),
            min: SSIM_WINDOW,
        });
    }
    let k = gaussian_window();
    Ok(per_image(a, b, |x, y, h, w| {
        let plane = h * w;
        let mut total = 0.0;
        let mut count = 0;
        for c in 0..3 {
            let px: Vec<f64> = x[c * plane..(c + 1) * plane]
                .iter()
                .map(|&v| v.to_f64())
                .collect();
            let py: Vec<f64> = y[c * plane..(c + 1) * plane]
                .iter()
                .map(|&v| v.to_f64())
                .collect();
            let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
                px.iter().zip(&py).map(|(&p, &q)| f(p, q)).collect()
            };
            let mu_x = filter_valid(&px, h, w, &k);
            let mu_y = filter_valid(&py, h, w, &k);
            let xx = filter_valid(&prod(&|p, _| p * p), h, w, &k);
            let yy = filter_valid(&prod(&|_, q| q * q), h, w, &k);
            let xy = filter_valid(&prod(&|p, q| p * q), h, w, &k);
            for i in 0..mu_x.len() {
                let (mx, my) = (mu_x[i], mu_y[i]);
                let vx = xx[i] - mx * mx;
                let vy = yy[i] - my * my;
                let cov = xy[i] - mx * my;
                let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
        total / count as f64
    }))
}

/// Per-pixel channel maximum of one `[3, H, W]` image.
fn lightness<T: Real>(img: &[T], plane: usize) -> Vec<f64> {
    (0..plane)
        .map(|i| {
            img[i]
                .to_f64()
                .max(img[plane + i].to_f64())
                .max(img[2 * plane + i].to_f64())
        })
        .collect()
}

/// Nearest-neighbour sampling so the shorter side is at most [`LOE_MAX_SIDE`].
fn loe_downsample(l: &[f64], h: usize, w: usize) -> Vec<f64> {
    let short = h.min(w);
    if short <= LOE_MAX_SIDE {
        return l.to_vec();
    }
    let r = LOE_MAX_SIDE as f64 / short as f64;
    let oh = ((h as f64 * r).round() as usize).max(1);
    let ow = ((w as f64 * r).round() as usize).max(1);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = (y * h / oh).min(h - 1);
        for x in 0..ow {
            let sx = (x * w / ow).min(w - 1);
            out.push(l[sy * w + sx]);
        }
    }
    out
}

/// Count of ordered pixel pairs whose lightness order differs, divided by
/// the number of sampled pixels.
pub fn loe_from_lightness(original: &[f64], enhanced: &[f64]) -> f64 {
    let m = original.len();
    let mut count = 0u64;
    for i in 0..m {
        let (a, b) = (original[i], enhanced[i]);
        for j in 0..m {
            if (a >= original[j]) != (b >= enhanced[j]) {
                count += 1;
            }
        }
    }
    count as f64 / m as f64
}

/// Lightness order error of `enhanced` relative to `original`.
pub fn loe<T: Real>(original: &ImageTensor<T>, enhanced: &ImageTensor<T>) -> Result<f64> {
    check_pair("loe", original, enhanced)?;
    Ok(per_image(original, enhanced, |x, y, h, w| {
        let lo = loe_downsample(&lightness(x, h * w), h, w);
        let le = loe_downsample(&lightness(y, h * w), h, w);
        loe_from_lightness(&lo, &le)
    }))
}

/// Compute one metric. `reference` is the ground truth for PSNR and SSIM and
/// the low-light input for LOE.
pub fn evaluate<T: Real>(
    metric: Metric,
    reference: &ImageTensor<T>,
    enhanced: &ImageTensor<T>,
) -> Result<f64> {
    match metric {
        Metric::Psnr => psnr(enhanced, reference),
        Metric::Ssim => ssim(enhanced, reference),
        Metric::Loe => loe(reference, enhanced),
    }
}
