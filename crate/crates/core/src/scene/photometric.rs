//! Brightness, contrast, saturation, hue and noise perturbations.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};
use crate::tensor::Tensor;

/// Half-widths of the uniform ranges each perturbation is drawn from.
///
/// | field        | effect                                  | allowed range |
/// |--------------|-----------------------------------------|---------------|
/// | `brightness` | add `U(-b, b)` to every channel         | `[0, 0.5]`    |
/// | `contrast`   | scale around the mean by `1 + U(-c, c)` | `[0, 1]`      |
/// | `saturation` | blend with gray by `1 + U(-s, s)`       | `[0, 1]`      |
/// | `hue`        | rotate hue by `U(-h, h)` radians        | `[0, pi]`     |
/// | `noise`      | Gaussian noise with std `U(0, n)`       | `[0, 0.2]`    |
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhotometricStrengths {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub noise: f64,
}

impl PhotometricStrengths {
    /// Augmentation used while training the translation networks.
    pub fn training() -> Self {
        PhotometricStrengths {
            brightness: 0.05,
            contrast: 0.1,
            saturation: 0.1,
            hue: 0.05,
            noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, hi: f64| {
            if (0.0..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} strength {v} outside [0, {hi}]")))
            }
        };
        check("brightness", self.brightness, 0.5)?;
        check("contrast", self.contrast, 1.0)?;
        check("saturation", self.saturation, 1.0)?;
        check("hue", self.hue, std::f64::consts::PI)?;
        check("noise", self.noise, 0.2)
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }
}

/// One concrete draw of the perturbations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Radians.
    pub hue: f64,
    pub noise_std: f64,
}

impl PhotometricParams {
    pub const IDENTITY: PhotometricParams = PhotometricParams {
        brightness: 0.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
        noise_std: 0.0,
    };

    pub fn sample(rng: &mut Rng, s: &PhotometricStrengths) -> Self {
        let mut sym = |half: f64| if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
        let brightness = sym(s.brightness);
        let contrast = 1.0 + sym(s.contrast);
        let saturation = 1.0 + sym(s.saturation);
        let hue = sym(s.hue);
        let noise_std = if s.noise > 0.0 { rng.random_range(0.0..=s.noise) } else { 0.0 };
        PhotometricParams {
            brightness,
            contrast,
            saturation,
            hue,
            noise_std,
        }
    }
}

/// Sample perturbations from `seed` and apply them. Output is clipped to
/// `[0, 1]`; zero strengths leave the image untouched.
pub fn photometric_distort(image: &Tensor<f32>, seed: u64, strengths: &PhotometricStrengths) -> Result<Tensor<f32>> {
    strengths.validate()?;
    let mut rng = seeded(seed);
    let params = PhotometricParams::sample(&mut rng, strengths);
    apply_photometric(image, &params, &mut rng)
}

/// Apply brightness, contrast, saturation, hue, then noise, and clip.
/// Stages at their identity value are skipped entirely.
pub fn apply_photometric(image: &Tensor<f32>, p: &PhotometricParams, rng: &mut Rng) -> Result<Tensor<f32>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("expected a [3, H, W] image, got {shape:?}")));
    }
    let hw = shape[1] * shape[2];
    let mut px: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();

    if p.brightness != 0.0 {
        px.iter_mut().for_each(|v| *v += p.brightness);
    }
    if p.contrast != 1.0 {
        let mean = (0..hw).map(|i| luma(&px, hw, i)).sum::<f64>() / hw as f64;
        px.iter_mut().for_each(|v| *v = (*v - mean) * p.contrast + mean);
    }
    if p.saturation != 1.0 {
        for i in 0..hw {
            let y = luma(&px, hw, i);
            for c in 0..3 {
                px[c * hw + i] = y + (px[c * hw + i] - y) * p.saturation;
            }
        }
    }
    if p.hue != 0.0 {
        let turn = p.hue / std::f64::consts::TAU;
        for i in 0..hw {
            let (h, s, v) = rgb_to_hsv(px[i], px[hw + i], px[2 * hw + i]);
            let (r, g, b) = hsv_to_rgb((h + turn).rem_euclid(1.0), s, v);
            px[i] = r;
            px[hw + i] = g;
            px[2 * hw + i] = b;
        }
    }
    if p.noise_std > 0.0 {
        let dist = Normal::new(0.0, p.noise_std).expect("finite std");
        px.iter_mut().for_each(|v| *v += dist.sample(rng));
    }
    let data = px.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Tensor::new(shape, data)
}

fn luma(px: &[f64], hw: usize, i: usize) -> f64 {
    0.299 * px[i] + 0.587 * px[hw + i] + 0.114 * px[2 * hw + i]
}

/// Hue in turns `[0, 1)`, saturation and value in `[0, 1]` for inputs there.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = h.rem_euclid(1.0) * 6.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}
