//! 8-bit RGB PNG reading and writing for `[3, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Convert a `[3, H, W]` tensor to an RGB buffer, clamping to `[0, 1]`.
pub fn to_rgb(pixels: &Tensor<f32>) -> Result<RgbImage> {
    let shape = pixels.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("expected a [3, H, W] image, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let d = pixels.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([quantize(d[i]), quantize(d[h * w + i]), quantize(d[2 * h * w + i])])
    }))
}

pub fn from_rgb(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("buffer sized from image")
}

pub fn save_png(path: &Path, pixels: &Tensor<f32>) -> Result<()> {
    to_rgb(pixels)?.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(from_rgb(&img.to_rgb8()))
}
