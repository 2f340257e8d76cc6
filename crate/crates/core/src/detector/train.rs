//! Detection loss and the detector training loop.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::anchors::{match_anchors, Assignment, MatchTargets};
use super::{Detector, HeadOutputs};
use crate::error::{Error, Result};
use crate::losses::fcl_elementwise;
use crate::rng::{derive_seed, seeded};
use crate::scene::{flip_horizontal, photometric_distort, LabeledImage, PhotometricStrengths};
use crate::tensor::{adam_step, AdamConfig, Graph, OptimState, Real, Tensor, Var};

/// Batched matching results as dense constant tensors.
#[derive(Clone, Debug)]
pub struct TrainTargets<T: Real> {
    /// One-hot classes `[N, A, K]`, zero rows for negatives.
    pub cls: Tensor<T>,
    /// `[N, A, 1]`: 1 for positives and negatives, 0 for ignored anchors.
    pub cls_mask: Tensor<T>,
    /// Encoded offsets `[N, A, 4]`.
    pub boxes: Tensor<T>,
    /// `[N, A, 1]`: 1 for positives.
    pub pos_mask: Tensor<T>,
    pub num_positive: usize,
}

impl<T: Real> TrainTargets<T> {
    pub fn new(targets: &[MatchTargets], num_classes: usize) -> Result<Self> {
        let n = targets.len();
        let a = targets.first().map_or(0, |t| t.assignments.len());
        if targets.iter().any(|t| t.assignments.len() != a) {
            return Err(Error::Shape("match targets cover different anchor counts".into()));
        }
        let mut cls = vec![T::zero(); n * a * num_classes];
        let mut cls_mask = vec![T::zero(); n * a];
        let mut boxes = vec![T::zero(); n * a * 4];
        let mut pos_mask = vec![T::zero(); n * a];
        let mut num_positive = 0;
        for (i, t) in targets.iter().enumerate() {
            for (j, asg) in t.assignments.iter().enumerate() {
                let idx = i * a + j;
                match asg {
                    Assignment::Positive(_) => {
                        let k = t.classes[j].expect("positives carry a class");
                        if k >= num_classes {
                            return Err(Error::InvalidArgument(format!(
                                "class {k} out of range for {num_classes} classes"
                            )));
                        }
                        cls[idx * num_classes + k] = T::one();
                        cls_mask[idx] = T::one();
                        pos_mask[idx] = T::one();
                        for c in 0..4 {
                            boxes[idx * 4 + c] = T::of(t.box_targets[j][c]);
                        }
                        num_positive += 1;
                    }
                    Assignment::Negative => cls_mask[idx] = T::one(),
                    Assignment::Ignore => {}
                }
            }
        }
        Ok(TrainTargets {
            cls: Tensor::new(&[n, a, num_classes], cls)?,
            cls_mask: Tensor::new(&[n, a, 1], cls_mask)?,
            boxes: Tensor::new(&[n, a, 4], boxes)?,
            pos_mask: Tensor::new(&[n, a, 1], pos_mask)?,
            num_positive,
        })
    }
}

/// Focal class loss over non-ignored anchors plus Huber box loss over
/// positives, both divided by the batch's positive count (at least 1).
/// The class term is [`fcl_elementwise`] with one-hot targets.
pub fn detector_training_loss<T: Real>(
    g: &mut Graph<T>,
    outputs: &HeadOutputs,
    targets: &TrainTargets<T>,
    gamma: f64,
    alpha: f64,
    delta: f64,
) -> Result<Var> {
    let cls: Vec<Var> = outputs.levels.iter().map(|l| l.cls).collect();
    let boxes: Vec<Var> = outputs.levels.iter().map(|l| l.boxes).collect();
    let logits = g.concat(&cls, 1)?;
    let offsets = g.concat(&boxes, 1)?;
    if g.shape(logits) != targets.cls.shape() {
        return Err(Error::Shape(format!(
            "head outputs {:?} do not match targets {:?}",
            g.shape(logits),
            targets.cls.shape()
        )));
    }
    let norm = 1.0 / targets.num_positive.max(1) as f64;

    let y = g.constant(targets.cls.clone());
    let cls_mask = g.constant(targets.cls_mask.clone());
    let p = g.sigmoid(logits)?;
    let fl = fcl_elementwise(g, y, p, gamma, alpha)?;
    let fl = g.mul(fl, cls_mask)?;
    let cls_loss = g.sum(fl)?;
    let cls_loss = g.scale(cls_loss, norm)?;

    let t = g.constant(targets.boxes.clone());
    let pos_mask = g.constant(targets.pos_mask.clone());
    let d = g.sub(offsets, t)?;
    let h = g.huber(d, delta)?;
    let h = g.mul(h, pos_mask)?;
    let box_loss = g.sum(h)?;
    let box_loss = g.scale(box_loss, norm)?;
    g.add(cls_loss, box_loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub gamma: f64,
    pub alpha: f64,
    pub delta: f64,
    /// Random left-right mirroring.
    pub flip: bool,
    pub distort: PhotometricStrengths,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            steps: 5000,
            batch_size: 16,
            seed: 0,
            adam: AdamConfig {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
            gamma: 2.0,
            alpha: 0.25,
            delta: 1.0,
            flip: true,
            distort: PhotometricStrengths::training(),
        }
    }
}

/// Train `detector` in place on uniformly sampled minibatches of `data`.
/// `on_step` receives the step index and loss.
pub fn train_detector(
    detector: &mut Detector<f32>,
    data: &[LabeledImage],
    config: &DetectorTrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("detector training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    config.distort.validate()?;
    let mut state = OptimState::new(config.adam, detector.params.tensors());
    for step in 0..config.steps {
        let mut rng = seeded(derive_seed(config.seed, &[step as u64]));
        let mut pixels = Vec::with_capacity(config.batch_size);
        let mut matches = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let mut img = data[rng.random_range(0..data.len())].clone();
            if config.flip && rng.random_bool(0.5) {
                img = flip_horizontal(&img);
            }
            if !config.distort.is_zero() {
                img.pixels = photometric_distort(&img.pixels, rng.random(), &config.distort)?;
            }
            matches.push(match_anchors(&detector.grid, &img.boxes, &img.classes)?);
            pixels.push(img.pixels);
        }
        let targets = TrainTargets::new(&matches, detector.config.num_classes)?;

        let mut g = Graph::new();
        let bound = detector.params.bind(&mut g, true);
        let x = g.constant(Tensor::stack(&pixels)?);
        let out = detector.forward(&mut g, &bound, x)?;
        let loss = detector_training_loss(&mut g, &out, &targets, config.gamma, config.alpha, config.delta)?;
        let value = g.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step as u64,
                term: "detection",
            });
        }
        let mut grads = g.backward(loss)?;
        let grads = bound.gradients(&g, &mut grads);
        adam_step(detector.params.tensors_mut(), &grads, &mut state)?;
        on_step(step, value);
    }
    Ok(())
}
