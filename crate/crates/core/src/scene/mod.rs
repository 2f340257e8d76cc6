//! Procedural labeled scenes and their two renderings.
//!
//! A [`Scene`] fixes geometry, classes and base colors. [`render`] turns it
//! into pixels in either the flat "sim" style or the textured, shaded,
//! color-shifted and noisy "real" style. Ground-truth boxes come from the
//! rasterized object masks, so both styles of one scene share labels
//! exactly.
//!
//! Pixels are stored channel-major, `[3, H, W]`.

mod dataset;
mod photometric;

pub use dataset::{
    export_dataset, export_records, generate_dataset, image_name, load_dataset, read_manifest, write_manifest, ManifestRecord,
    IMAGE_DIR, MANIFEST,
};
pub use photometric::{
    apply_photometric, hsv_to_rgb, photometric_distort, rgb_to_hsv, PhotometricParams, PhotometricStrengths,
};

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

/// Rejection samples allowed per scene before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
/// Smallest rendered object, in pixels.
pub const MIN_OBJECT_PIXELS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Sim,
    Real,
}

impl Style {
    pub fn as_str(self) -> &'static str {
        match self {
            Style::Sim => "sim",
            Style::Real => "real",
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Style {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim" => Ok(Style::Sim),
            "real" => Ok(Style::Real),
            other => Err(Error::InvalidArgument(format!("unknown style `{other}` (expected sim or real)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
    Ring,
}

impl ShapeKind {
    /// Each class has its own primitive.
    pub fn for_class(class: usize) -> Self {
        [ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Triangle, ShapeKind::Ring][class % 4]
    }
}

/// Inner radius of a ring relative to its outer radius.
const RING_INNER: f64 = 0.55;

const CLASS_COLORS: [[f64; 3]; 4] = [[0.85, 0.22, 0.2], [0.2, 0.68, 0.3], [0.22, 0.35, 0.85], [0.9, 0.78, 0.2]];

const BACKGROUNDS: [[f64; 3]; 4] = [[0.55, 0.55, 0.55], [0.45, 0.5, 0.56], [0.56, 0.5, 0.42], [0.4, 0.46, 0.4]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: usize,
    pub shape: ShapeKind,
    /// `(cy, cx)` in normalized coordinates.
    pub center: [f64; 2],
    /// Circumradius, normalized.
    pub size: f64,
    /// Short side over long side, for rectangles.
    pub aspect: f64,
    /// Radians.
    pub rotation: f64,
    pub color: [f64; 3],
}

impl ObjectSpec {
    /// Whether pixel-space point `(y, x)` lies inside, for an image of side `n`.
    fn contains(&self, y: f64, x: f64, n: f64) -> bool {
        let dy = y - self.center[0] * n;
        let dx = x - self.center[1] * n;
        let r = self.size * n;
        let d2 = dy * dy + dx * dx;
        match self.shape {
            ShapeKind::Disk => d2 <= r * r,
            ShapeKind::Ring => d2 <= r * r && d2 >= (RING_INNER * r).powi(2),
            ShapeKind::Rectangle => {
                let (s, c) = self.rotation.sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                // Half-diagonal equals r.
                let half_w = r / (1.0 + self.aspect * self.aspect).sqrt();
                let half_h = half_w * self.aspect;
                u.abs() <= half_w && v.abs() <= half_h
            }
            ShapeKind::Triangle => {
                let verts: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let a = self.rotation + TAU * k as f64 / 3.0;
                        (r * a.sin(), r * a.cos())
                    })
                    .collect();
                let cross = |(ay, ax): (f64, f64), (by, bx): (f64, f64)| {
                    (bx - ax) * (dy - ay) - (by - ay) * (dx - ax)
                };
                let s0 = cross(verts[0], verts[1]);
                let s1 = cross(verts[1], verts[2]);
                let s2 = cross(verts[2], verts[0]);
                (s0 >= 0.0 && s1 >= 0.0 && s2 >= 0.0) || (s0 <= 0.0 && s1 <= 0.0 && s2 <= 0.0)
            }
        }
    }

    /// Pixel mask over an `n x n` grid, sampled at pixel centers.
    pub fn mask(&self, n: usize) -> Vec<bool> {
        let nf = n as f64;
        let mut m = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = self.contains(i as f64 + 0.5, j as f64 + 0.5, nf);
            }
        }
        m
    }
}

/// Tight normalized bounds of a mask, `None` if empty.
pub fn mask_box(mask: &[bool], n: usize) -> Option<BBox> {
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for (idx, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (i, j) = (idx / n, idx % n);
        r0 = r0.min(i);
        c0 = c0.min(j);
        r1 = r1.max(i);
        c1 = c1.max(j);
    }
    (r0 != usize::MAX).then(|| {
        let nf = n as f64;
        [r0 as f64 / nf, c0 as f64 / nf, (r1 + 1) as f64 / nf, (c1 + 1) as f64 / nf]
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Circumradius range, normalized.
    pub min_size: f64,
    pub max_size: f64,
    /// Clearance kept around every object and from the image border, in pixels.
    pub stroke: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 64,
            num_classes: 4,
            min_objects: 2,
            max_objects: 6,
            min_size: 0.08,
            max_size: 0.15,
            stroke: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > CLASS_COLORS.len() {
            return Err(Error::InvalidArgument(format!(
                "class count must be in 1..={}, got {}",
                CLASS_COLORS.len(),
                self.num_classes
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::InvalidArgument("min_objects exceeds max_objects".into()));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "size range [{}, {}] must satisfy 0 < min <= max < 0.5",
                self.min_size, self.max_size
            )));
        }
        if self.image_size < 8 {
            return Err(Error::InvalidArgument("image size must be at least 8".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub image_size: usize,
    pub objects: Vec<ObjectSpec>,
    pub background: usize,
}

impl Scene {
    pub fn boxes(&self) -> Vec<BBox> {
        self.objects
            .iter()
            .map(|o| mask_box(&o.mask(self.image_size), self.image_size).expect("placement checks non-empty masks"))
            .collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.class).collect()
    }
}

/// Draw a scene: object count, classes, sizes and non-overlapping positions.
/// Every object keeps `stroke` pixels of clearance from the border and from
/// every other object.
pub fn sample_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = seeded(seed);
    let n = config.image_size;
    let margin = config.stroke / n as f64;
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let background = rng.random_range(0..BACKGROUNDS.len());
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count {
        if attempts == MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Placement { attempts });
        }
        attempts += 1;
        let class = rng.random_range(0..config.num_classes);
        let size = rng.random_range(config.min_size..=config.max_size);
        let lo = size + margin;
        if lo >= 1.0 - lo {
            continue;
        }
        let center = [rng.random_range(lo..1.0 - lo), rng.random_range(lo..1.0 - lo)];
        let aspect = rng.random_range(0.5..=1.0);
        let rotation = rng.random_range(0.0..PI);
        let base = CLASS_COLORS[class];
        let color = base.map(|c| (c + rng.random_range(-0.06..=0.06)).clamp(0.0, 1.0));
        let clear = objects.iter().all(|o| {
            let d = ((o.center[0] - center[0]).powi(2) + (o.center[1] - center[1]).powi(2)).sqrt();
            d >= o.size + size + 2.0 * margin
        });
        if !clear {
            continue;
        }
        let obj = ObjectSpec {
            class,
            shape: ShapeKind::for_class(class),
            center,
            size,
            aspect,
            rotation,
            color,
        };
        if obj.mask(n).iter().filter(|&&m| m).count() < MIN_OBJECT_PIXELS {
            continue;
        }
        objects.push(obj);
    }
    Ok(Scene {
        seed,
        image_size: n,
        objects,
        background,
    })
}

/// Pixels plus labels for one rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
    pub domain: Style,
    pub seed: u64,
}

/// Fixed color response of the "real" camera: a warm, slightly washed-out
/// shift applied through the photometric stage.
const REAL_RESPONSE: PhotometricParams = PhotometricParams {
    brightness: 0.03,
    contrast: 0.8,
    saturation: 0.75,
    hue: 0.2,
    noise_std: 0.0,
};

/// Per-image jitter around [`REAL_RESPONSE`].
const REAL_JITTER: PhotometricStrengths = PhotometricStrengths {
    brightness: 0.06,
    contrast: 0.1,
    saturation: 0.1,
    hue: 0.08,
    noise: 0.0,
};

const REAL_NOISE_STD: f64 = 0.02;

/// Render `scene` in `style`; `seed` drives the stochastic parts of the
/// "real" style and is unused for "sim".
pub fn render(scene: &Scene, style: Style, seed: u64) -> Result<LabeledImage> {
    let n = scene.image_size;
    let hw = n * n;
    let bg = BACKGROUNDS[scene.background % BACKGROUNDS.len()];
    let mut px = vec![0.0f64; 3 * hw];
    for c in 0..3 {
        px[c * hw..(c + 1) * hw].fill(bg[c]);
    }
    let mut boxes = Vec::with_capacity(scene.objects.len());
    for obj in &scene.objects {
        let mask = obj.mask(n);
        let b = mask_box(&mask, n).ok_or_else(|| Error::InvalidArgument("object covers no pixels".into()))?;
        boxes.push(b);
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for c in 0..3 {
                px[c * hw + i] = obj.color[c];
            }
        }
    }
    if style == Style::Real {
        px = realize(px, n, seed)?;
    }
    let data = px.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(LabeledImage {
        pixels: Tensor::new(&[3, n, n], data)?,
        boxes,
        classes: scene.classes(),
        domain: style,
        seed: scene.seed,
    })
}

/// Texture, directional shading, color response, sensor noise, vignette.
fn realize(mut px: Vec<f64>, n: usize, seed: u64) -> Result<Vec<f64>> {
    let hw = n * n;
    let mut rng = seeded(derive_seed(seed, &[0x7265_616c]));
    let nf = n as f64;

    // Multiplicative low-frequency texture plus fine grain.
    let grid = 9;
    let coarse: Vec<f64> = (0..grid * grid).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let amp = rng.random_range(0.08..=0.16);
    for i in 0..n {
        for j in 0..n {
            let gy = (i as f64 + 0.5) / nf * (grid - 1) as f64;
            let gx = (j as f64 + 0.5) / nf * (grid - 1) as f64;
            let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(grid - 1), (x0 + 1).min(grid - 1));
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            let t = coarse[y0 * grid + x0] * (1.0 - fy) * (1.0 - fx)
                + coarse[y0 * grid + x1] * (1.0 - fy) * fx
                + coarse[y1 * grid + x0] * fy * (1.0 - fx)
                + coarse[y1 * grid + x1] * fy * fx;
            let grain = rng.random_range(-0.03..=0.03);
            for c in 0..3 {
                let v = &mut px[c * hw + i * n + j];
                *v = *v * (1.0 + amp * t) + grain;
            }
        }
    }

    // Linear light falloff across the image.
    let angle = rng.random_range(0.0..TAU);
    let strength = rng.random_range(0.15..=0.3);
    let (s, c) = angle.sin_cos();
    for i in 0..n {
        for j in 0..n {
            let y = (i as f64 + 0.5) / nf - 0.5;
            let x = (j as f64 + 0.5) / nf - 0.5;
            let f = 1.0 + 2.0 * strength * (x * c + y * s);
            for ch in 0..3 {
                px[ch * hw + i * n + j] *= f;
            }
        }
    }

    let jitter = PhotometricParams::sample(&mut rng, &REAL_JITTER);
    let params = PhotometricParams {
        brightness: REAL_RESPONSE.brightness + jitter.brightness,
        contrast: REAL_RESPONSE.contrast * jitter.contrast,
        saturation: REAL_RESPONSE.saturation * jitter.saturation,
        hue: REAL_RESPONSE.hue + jitter.hue,
        noise_std: 0.0,
    };
    let clipped: Vec<f32> = px.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    let shifted = apply_photometric(&Tensor::new(&[3, n, n], clipped)?, &params, &mut rng)?;
    let mut px: Vec<f64> = shifted.data().iter().map(|&v| v as f64).collect();

    let noise = Normal::new(0.0, REAL_NOISE_STD).expect("finite std");
    px.iter_mut().for_each(|v| *v += noise.sample(&mut rng));

    let vignette = rng.random_range(0.25..=0.45);
    for i in 0..n {
        for j in 0..n {
            let y = (i as f64 + 0.5) / nf - 0.5;
            let x = (j as f64 + 0.5) / nf - 0.5;
            let f = 1.0 - vignette * (x * x + y * y) / 0.5;
            for ch in 0..3 {
                px[ch * hw + i * n + j] *= f;
            }
        }
    }
    Ok(px)
}

/// Render seed for the "real" style of a scene, shared by all tools.
pub fn real_render_seed(scene_seed: u64) -> u64 {
    derive_seed(scene_seed, &[1])
}

/// Sample and render one scene in one style.
pub fn make_image(seed: u64, style: Style, config: &SceneConfig) -> Result<LabeledImage> {
    let scene = sample_scene(seed, config)?;
    render(&scene, style, real_render_seed(seed))
}

/// Rendered pixels for the same scene in both styles.
pub fn make_pair(seed: u64, config: &SceneConfig) -> Result<(LabeledImage, LabeledImage)> {
    let scene = sample_scene(seed, config)?;
    Ok((
        render(&scene, Style::Sim, real_render_seed(seed))?,
        render(&scene, Style::Real, real_render_seed(seed))?,
    ))
}

/// Mirror an image and its boxes left to right.
pub fn flip_horizontal(img: &LabeledImage) -> LabeledImage {
    let s = img.pixels.shape();
    let (h, w) = (s[1], s[2]);
    let src = img.pixels.data();
    let data = (0..3 * h * w)
        .map(|idx| {
            let (c, rest) = (idx / (h * w), idx % (h * w));
            let (i, j) = (rest / w, rest % w);
            src[c * h * w + i * w + (w - 1 - j)]
        })
        .collect();
    LabeledImage {
        pixels: Tensor::new(s, data).expect("same shape"),
        boxes: img.boxes.iter().map(|b| [b[0], 1.0 - b[3], b[2], 1.0 - b[1]]).collect(),
        classes: img.classes.clone(),
        domain: img.domain,
        seed: img.seed,
    }
}

/// Draw `count` scene seeds from a disjoint range per domain, so sim and
/// real corpora never share a scene.
pub fn corpus_seeds(domain: Style, base: u64, count: usize) -> Vec<u64> {
    let offset = match domain {
        Style::Sim => 0,
        Style::Real => 1 << 40,
    };
    (0..count as u64).map(|i| base.wrapping_add(offset + i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let c = SceneConfig::default();
        assert_eq!(sample_scene(42, &c).unwrap(), sample_scene(42, &c).unwrap());
    }

    #[test]
    fn fixed_count() {
        let c = SceneConfig {
            min_objects: 1,
            max_objects: 1,
            ..Default::default()
        };
        for seed in 0..20 {
            assert_eq!(sample_scene(seed, &c).unwrap().objects.len(), 1);
        }
    }

    #[test]
    fn impossible_placement_errors() {
        let c = SceneConfig {
            min_objects: 40,
            max_objects: 40,
            min_size: 0.2,
            max_size: 0.2,
            ..Default::default()
        };
        assert!(matches!(sample_scene(0, &c), Err(Error::Placement { attempts: 1000 })));
    }

    #[test]
    fn centered_disk_box() {
        let obj = ObjectSpec {
            class: 0,
            shape: ShapeKind::Disk,
            center: [0.5, 0.5],
            size: 0.25,
            aspect: 1.0,
            rotation: 0.0,
            color: [1.0, 0.0, 0.0],
        };
        let b = mask_box(&obj.mask(64), 64).unwrap();
        for (v, e) in b.iter().zip([0.25, 0.25, 0.75, 0.75]) {
            assert!((v - e).abs() <= 1.0 / 64.0, "{b:?}");
        }
    }

    #[test]
    fn styles_share_labels() {
        let c = SceneConfig::default();
        for seed in 0..10 {
            let (sim, real) = make_pair(seed, &c).unwrap();
            assert_eq!(sim.boxes, real.boxes);
            assert_eq!(sim.classes, real.classes);
            assert_ne!(sim.pixels, real.pixels);
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = make_image(3, Style::Real, &SceneConfig::default()).unwrap();
        let back = flip_horizontal(&flip_horizontal(&img));
        assert_eq!(back.pixels, img.pixels);
        for (a, b) in back.boxes.iter().zip(&img.boxes) {
            for k in 0..4 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn style_parses() {
        assert_eq!("real".parse::<Style>().unwrap(), Style::Real);
        assert!("paired".parse::<Style>().is_err());
    }
}
