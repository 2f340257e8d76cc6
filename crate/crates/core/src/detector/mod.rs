//! A small one-stage anchor detector: strided conv backbone, two-level
//! feature pyramid, shared class and box heads.
//!
//! Head outputs are laid out per level as `[N, anchors, K]` logits and
//! `[N, anchors, 4]` offsets, anchors ordered to match [`AnchorGrid`].

mod anchors;
mod postprocess;
mod train;

pub use anchors::{
    area, build_anchors, decode, encode, iou, match_anchors, Anchor, AnchorGrid, AnchorLevel, Assignment, BBox,
    MatchTargets, NEGATIVE_IOU, POSITIVE_IOU,
};
pub use postprocess::{decode_nms, evaluate_map, nms, Detections, MapResult, NmsConfig};
pub use train::{detector_training_loss, train_detector, DetectorTrainConfig, TrainTargets};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, LEAKY_SLOPE};
use crate::rng::seeded;
use crate::tensor::{BoundParams, Graph, ParamStore, Real, Tensor, Var};

/// Graph handles for one pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    pub cls: Var,
    pub boxes: Var,
}

/// Per-level head outputs recorded on a graph.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub levels: Vec<LevelOutput>,
}

/// Head outputs as plain tensors, per level.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTensors<T: Real = f32> {
    pub cls: Vec<Tensor<T>>,
    pub boxes: Vec<Tensor<T>>,
}

impl<T: Real> HeadTensors<T> {
    pub fn batch(&self) -> usize {
        self.cls.first().map_or(0, |t| t.shape()[0])
    }

    /// Logits `[anchors * K]` and offsets `[anchors * 4]` for image `n`,
    /// concatenated over levels.
    pub fn image(&self, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut cls = Vec::new();
        let mut boxes = Vec::new();
        for (c, b) in self.cls.iter().zip(&self.boxes) {
            let per_c = c.numel() / c.shape()[0];
            let per_b = b.numel() / b.shape()[0];
            cls.extend(c.data()[n * per_c..(n + 1) * per_c].iter().map(|v| v.f64()));
            boxes.extend(b.data()[n * per_b..(n + 1) * per_b].iter().map(|v| v.f64()));
        }
        (cls, boxes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// Output channels of the four stride-2 backbone convs.
    pub backbone: [usize; 4],
    pub fpn_channels: usize,
    pub head_channels: usize,
    /// Height/width ratios of the anchors at each location.
    pub ratios: Vec<f64>,
    /// Initial foreground probability of the class head.
    pub prior: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_size: 64,
            num_classes: 4,
            backbone: [16, 32, 64, 64],
            fpn_channels: 32,
            head_channels: 32,
            ratios: vec![0.5, 1.0, 2.0],
            prior: 0.01,
        }
    }
}

impl DetectorConfig {
    /// Pyramid strides: the outputs of the third and fourth backbone convs.
    pub const STRIDES: [usize; 2] = [8, 16];

    pub fn anchors(&self) -> Result<AnchorGrid> {
        build_anchors(self.image_size, &Self::STRIDES, &self.ratios)
    }
}

/// Detector weights plus the anchor grid they predict against.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector<T: Real = f32> {
    pub config: DetectorConfig,
    pub grid: AnchorGrid,
    pub params: ParamStore<T>,
}

impl<T: Real> Detector<T> {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        if config.num_classes == 0 {
            return Err(Error::InvalidArgument("detector needs at least one class".into()));
        }
        if !(config.prior > 0.0 && config.prior < 1.0) {
            return Err(Error::InvalidArgument(format!("class prior must be in (0, 1), got {}", config.prior)));
        }
        let grid = config.anchors()?;
        let mut rng = seeded(seed);
        let mut p = ParamStore::new();
        let mut cin = 3;
        for (i, &c) in config.backbone.iter().enumerate() {
            nn::add_conv(&mut p, &mut rng, &format!("backbone.{i}"), cin, c, 3);
            cin = c;
        }
        let f = config.fpn_channels;
        nn::add_conv(&mut p, &mut rng, "fpn.lateral3", config.backbone[2], f, 1);
        nn::add_conv(&mut p, &mut rng, "fpn.lateral4", config.backbone[3], f, 1);
        nn::add_conv(&mut p, &mut rng, "fpn.smooth3", f, f, 3);

        let a = config.ratios.len();
        let h = config.head_channels;
        let k = config.num_classes;
        nn::add_conv(&mut p, &mut rng, "head.cls.0", f, h, 3);
        p.insert("head.cls.1.w", nn::normal(&mut rng, &[a * k, h, 3, 3], 0.01));
        let bias = -((1.0 - config.prior) / config.prior).ln();
        p.insert("head.cls.1.b", Tensor::full(&[a * k], T::of(bias)));
        nn::add_conv(&mut p, &mut rng, "head.box.0", f, h, 3);
        p.insert("head.box.1.w", nn::normal(&mut rng, &[a * 4, h, 3, 3], 0.01));
        p.insert("head.box.1.b", Tensor::zeros(&[a * 4]));
        Ok(Detector { config, grid, params: p })
    }

    pub fn cast<U: Real>(&self) -> Detector<U> {
        Detector {
            config: self.config.clone(),
            grid: self.grid.clone(),
            params: self.params.cast(),
        }
    }

    /// Record a forward pass of `images` (`[N, 3, S, S]`, values in `[0, 1]`).
    pub fn forward(&self, g: &mut Graph<T>, p: &BoundParams, images: Var) -> Result<HeadOutputs> {
        let s = self.config.image_size;
        let shape = g.shape(images);
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!(
                "detector expects [N, 3, {s}, {s}] images, got {shape:?}"
            )));
        }
        let mut h = g.shift(images, -0.5)?;
        let mut feats = Vec::with_capacity(4);
        for i in 0..4 {
            h = nn::conv(g, p, &format!("backbone.{i}"), h, 2, 1)?;
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
            feats.push(h);
        }
        let p4 = nn::conv(g, p, "fpn.lateral4", feats[3], 1, 0)?;
        let l3 = nn::conv(g, p, "fpn.lateral3", feats[2], 1, 0)?;
        let up = g.upsample2x(p4)?;
        let p3 = g.add(l3, up)?;
        let p3 = nn::conv(g, p, "fpn.smooth3", p3, 1, 1)?;

        let mut levels = Vec::with_capacity(2);
        for feat in [p3, p4] {
            let cls = self.head(g, p, "head.cls", feat, self.config.num_classes)?;
            let boxes = self.head(g, p, "head.box", feat, 4)?;
            levels.push(LevelOutput { cls, boxes });
        }
        Ok(HeadOutputs { levels })
    }

    fn head(&self, g: &mut Graph<T>, p: &BoundParams, name: &str, feat: Var, per_anchor: usize) -> Result<Var> {
        let h = nn::conv(g, p, &format!("{name}.0"), feat, 1, 1)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let out = nn::conv(g, p, &format!("{name}.1"), h, 1, 1)?;
        // [N, A*k, h, w] -> [N, h*w*A, k]: location-major, then anchor.
        let shape = g.shape(out).to_vec();
        let out = g.permute(out, &[0, 2, 3, 1])?;
        let anchors = shape[2] * shape[3] * self.config.ratios.len();
        g.reshape(out, &[shape[0], anchors, per_anchor])
    }

    /// Forward pass without gradients.
    pub fn predict(&self, images: &Tensor<T>) -> Result<HeadTensors<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &p, x)?;
        Ok(HeadTensors {
            cls: out.levels.iter().map(|l| g.value(l.cls).clone()).collect(),
            boxes: out.levels.iter().map(|l| g.value(l.boxes).clone()).collect(),
        })
    }

    /// Decoded, suppressed detections for each image in the batch.
    pub fn detect(&self, images: &Tensor<T>, nms_config: &NmsConfig) -> Result<Vec<Detections>> {
        let heads = self.predict(images)?;
        (0..heads.batch())
            .map(|n| {
                let (cls, boxes) = heads.image(n);
                decode_nms(&cls, &boxes, &self.grid, self.config.num_classes, nms_config)
            })
            .collect()
    }

    /// [`Detector::detect`] in chunks of `batch` images.
    pub fn detect_all(&self, images: &[Tensor<T>], batch: usize, nms_config: &NmsConfig) -> Result<Vec<Detections>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            out.extend(self.detect(&Tensor::stack(chunk)?, nms_config)?);
        }
        Ok(out)
    }
}
