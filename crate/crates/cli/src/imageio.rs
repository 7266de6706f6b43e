//! 8-bit image files to and from `[1, 3, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use semi_llie_core::{ImageTensor, Tensor};

use crate::error::{CliError, Result};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

pub fn load_image(path: &Path) -> Result<ImageTensor<f32>> {
    let img = image::open(path)
        .map_err(|source| CliError::Image {
            path: path.into(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let t = Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        f32::from(raw[p * 3 + c]) / 255.0
    });
    Ok(ImageTensor::new(t)?)
}

/// Quantize image `b` of the batch to 8 bits and write it; the format
/// follows the file extension.
pub fn save_image(path: &Path, img: &ImageTensor<f32>, b: usize) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = vec![0u8; h * w * 3];
    for c in 0..3 {
        for (p, &v) in img.plane(b, c).iter().enumerate() {
            buf[p * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let out =
        image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to the image");
    out.save(path).map_err(|source| CliError::Image {
        path: path.into(),
        source,
    })
}
