//! Image tensors and pixel-level operations outside the autograd tape.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Euclid;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

/// ITU-R BT.601 luma weights.
pub const LUMA_601: [f64; 3] = [0.299, 0.587, 0.114];

/// Batched RGB images `[B, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T>(Tensor<T>);

impl<T: Real> ImageTensor<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        match t.shape() {
            &[_, 3, h, w] if h > 0 && w > 0 => {}
            s => {
                return Err(Error::Config(alloc::format!(
                    "image tensors must be [B, 3, H, W], got {:?}",
                    s
                )))
            }
        }
        if !t.is_finite() {
            return Err(Error::Precondition("image has non-finite values".into()));
        }
        Ok(Self(t))
    }

    pub fn zeros(b: usize, h: usize, w: usize) -> Self {
        Self(Tensor::zeros(&[b, 3, h, w]))
    }

    pub fn from_fn(b: usize, h: usize, w: usize, f: impl FnMut(usize) -> T) -> Self {
        Self(Tensor::from_fn(&[b, 3, h, w], f))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    /// Pixel `(b, c, y, x)`.
    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        let (h, w) = (self.height(), self.width());
        self.0.data()[((b * 3 + c) * h + y) * w + x]
    }

    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let hw = self.height() * self.width();
        &self.0.data()[(b * 3 + c) * hw..(b * 3 + c + 1) * hw]
    }

    pub fn clamp01(&self) -> Self {
        Self(self.0.clamp(T::zero(), T::one()))
    }

    /// Single image `b` as a batch of one.
    pub fn image(&self, b: usize) -> Result<Self> {
        Ok(Self(self.0.narrow0(b, 1)?))
    }

    pub fn stack(parts: &[Self]) -> Result<Self> {
        let ts: Vec<Tensor<T>> = parts.iter().map(|p| p.0.clone()).collect();
        Self::new(Tensor::stack0(&ts)?)
    }

    pub fn cast<U: Real>(&self) -> ImageTensor<U> {
        ImageTensor(self.0.cast())
    }

    fn map_planes(&self, mut f: impl FnMut(&[T], &mut [T], usize, usize)) -> Self {
        let (h, w) = (self.height(), self.width());
        let mut out = vec![T::zero(); self.0.len()];
        for (src, dst) in self
            .0
            .data()
            .chunks_exact(h * w)
            .zip(out.chunks_exact_mut(h * w))
        {
            f(src, dst, h, w);
        }
        Self(Tensor::from_vec(self.0.shape(), out).unwrap())
    }

    /// Apply `f` to every RGB pixel.
    fn map_pixels(&self, f: impl Fn([T; 3]) -> [T; 3]) -> Self {
        let hw = self.height() * self.width();
        let mut out = self.0.clone();
        for img in out.data_mut().chunks_exact_mut(3 * hw) {
            for i in 0..hw {
                let px = f([img[i], img[hw + i], img[2 * hw + i]]);
                img[i] = px[0];
                img[hw + i] = px[1];
                img[2 * hw + i] = px[2];
            }
        }
        Self(out)
    }
}

/// Bilinear resize with half-pixel centers (no antialiasing).
pub fn resize_bilinear<T: Real>(
    img: &ImageTensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<ImageTensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("resize target must be non-empty".into()));
    }
    let (h, w) = (img.height(), img.width());
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let taps = |inp: usize, out: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let b = img.batch();
    let mut out = Vec::with_capacity(b * 3 * out_h * out_w);
    for plane in img.tensor().data().chunks_exact(h * w) {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let v = |y: usize, x: usize| plane[y * w + x].to_f64();
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                out.push(T::from_f64(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    ImageTensor::new(Tensor::from_vec(&[b, 3, out_h, out_w], out)?)
}

/// Replace every pixel with its BT.601 luma on all three channels.
pub fn to_grayscale<T: Real>(img: &ImageTensor<T>) -> ImageTensor<T> {
    let [wr, wg, wb] = LUMA_601.map(T::from_f64);
    img.map_pixels(|[r, g, b]| {
        let y = wr * r + wg * g + wb * b;
        [y, y, y]
    })
}

/// `factor * img`.
pub fn adjust_brightness<T: Real>(img: &ImageTensor<T>, factor: T) -> ImageTensor<T> {
    img.map_pixels(|p| p.map(|v| v * factor))
}

/// Blend each image with the mean of its luma.
pub fn adjust_contrast<T: Real>(img: &ImageTensor<T>, factor: T) -> ImageTensor<T> {
    let gray = to_grayscale(img);
    let hw = img.height() * img.width();
    let mut out = img.tensor().clone();
    for (b, chunk) in out.data_mut().chunks_exact_mut(3 * hw).enumerate() {
        let mean = gray.plane(b, 0).iter().copied().sum::<T>() / T::from_f64(hw as f64);
        for v in chunk.iter_mut() {
            *v = factor * *v + (T::one() - factor) * mean;
        }
    }
    ImageTensor(out)
}

/// Blend each pixel with its luma.
pub fn adjust_saturation<T: Real>(img: &ImageTensor<T>, factor: T) -> ImageTensor<T> {
    let [wr, wg, wb] = LUMA_601.map(T::from_f64);
    img.map_pixels(|[r, g, b]| {
        let y = wr * r + wg * g + wb * b;
        [r, g, b].map(|v| factor * v + (T::one() - factor) * y)
    })
}

/// Rotate hue by `shift` turns (in `[-0.5, 0.5]`) through HSV.
pub fn adjust_hue<T: Real>(img: &ImageTensor<T>, shift: T) -> ImageTensor<T> {
    let shift = shift.to_f64();
    img.map_pixels(|px| {
        let [r, g, b] = px.map(|v| v.to_f64());
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let h = Euclid::rem_euclid(&(h + shift), &1.0);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        [T::from_f64(r), T::from_f64(g), T::from_f64(b)]
    })
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        Euclid::rem_euclid(&((g - b) / delta), &6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Separable Gaussian blur with reflect padding; `sigma <= 0` is the identity.
pub fn gaussian_blur<T: Real>(img: &ImageTensor<T>, kernel: usize, sigma: f64) -> ImageTensor<T> {
    if sigma <= 0.0 || kernel < 2 {
        return img.clone();
    }
    let half = (kernel / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - m }) as usize
    };
    img.map_planes(|src, dst, h, w| {
        let mut tmp = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| {
                        kv * src[y * w + reflect(x as isize + t as isize - half, w)].to_f64()
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * tmp[reflect(y as isize + t as isize - half, h) * w + x])
                    .sum();
                dst[y * w + x] = T::from_f64(v);
            }
        }
    })
}

/// Window `[y, y+h) x [x, x+w)` of every image.
pub fn crop<T: Real>(
    img: &ImageTensor<T>,
    y: usize,
    x: usize,
    h: usize,
    w: usize,
) -> Result<ImageTensor<T>> {
    if y + h > img.height() || x + w > img.width() || h == 0 || w == 0 {
        return Err(Error::Precondition(alloc::format!(
            "crop {}x{} at ({}, {}) outside {}x{}",
            h,
            w,
            y,
            x,
            img.height(),
            img.width()
        )));
    }
    let (ih, iw) = (img.height(), img.width());
    let mut out = Vec::with_capacity(img.batch() * 3 * h * w);
    for plane in img.tensor().data().chunks_exact(ih * iw) {
        for yy in y..y + h {
            out.extend_from_slice(&plane[yy * iw + x..yy * iw + x + w]);
        }
    }
    ImageTensor::new(Tensor::from_vec(&[img.batch(), 3, h, w], out)?)
}

/// Rotate by `k * 90` degrees counter-clockwise.
pub fn rot90<T: Real>(img: &ImageTensor<T>, k: usize) -> ImageTensor<T> {
    let k = k % 4;
    if k == 0 {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let (oh, ow) = if k % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = Vec::with_capacity(img.tensor().len());
    for plane in img.tensor().data().chunks_exact(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let (sy, sx) = match k {
                    1 => (ox, w - 1 - oy),
                    2 => (h - 1 - oy, w - 1 - ox),
                    _ => (h - 1 - ox, oy),
                };
                out.push(plane[sy * w + sx]);
            }
        }
    }
    ImageTensor(Tensor::from_vec(&[img.batch(), 3, oh, ow], out).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_of_pure_red() {
        let img =
            ImageTensor::new(Tensor::from_vec(&[1, 3, 1, 1], vec![1.0f64, 0.0, 0.0]).unwrap())
                .unwrap();
        let g = to_grayscale(&img);
        for c in 0..3 {
            assert!((g.at(0, c, 0, 0) - 0.299).abs() < 1e-15);
        }
    }

    #[test]
    fn hsv_roundtrip() {
        for &(r, g, b) in &[
            (0.2, 0.5, 0.9),
            (1.0, 0.0, 0.0),
            (0.3, 0.3, 0.3),
            (0.9, 0.8, 0.1),
        ] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let img = ImageTensor::<f32>::from_fn(2, 3, 5, |i| i as f32);
        let mut r = img.clone();
        for _ in 0..4 {
            r = rot90(&r, 1);
        }
        assert_eq!(r, img);
        assert_eq!(rot90(&img, 1).height(), 5);
        // counter-clockwise: top-right corner moves to top-left
        assert_eq!(rot90(&img, 1).at(0, 0, 0, 0), img.at(0, 0, 0, 4));
    }

    #[test]
    fn blur_preserves_constant_planes() {
        let img = ImageTensor::<f64>::from_fn(1, 6, 7, |_| 0.25);
        let b = gaussian_blur(&img, 5, 1.3);
        assert!(b.tensor().data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }
}
