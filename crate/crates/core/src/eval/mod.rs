//! Translation quality metrics: detection consistency, ground-truth
//! preservation and a domain realism score, plus report emission.

mod domain;
mod report;

pub use domain::{
    train_domain_classifier, DomainClassifier, DomainConfig, DECISION_THRESHOLD, MIN_VAL_ACCURACY,
};
pub use report::{draw_detections, emit_report, overlay_strip, OVERLAY_COUNT};

use serde::{Deserialize, Serialize};

use crate::detector::{evaluate_map, iou, BBox, Detections, Detector, NmsConfig};
use crate::error::{Error, Result};
use crate::gan::{GanBundle, G};
use crate::scene::{LabeledImage, Style};
use crate::tensor::Tensor;

/// IoU needed for two detections to count as the same object.
pub const MATCH_IOU: f64 = 0.5;

/// Greedy class-agnostic matching of one image's detections: all pairs with
/// IoU at least `threshold`, taken in decreasing IoU order, each box used
/// once. Returns `(index_a, index_b, iou)` triples.
pub fn greedy_match(a: &[BBox], b: &[BBox], threshold: f64) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for (i, ba) in a.iter().enumerate() {
        for (j, bb) in b.iter().enumerate() {
            let v = iou(ba, bb);
            if v >= threshold {
                pairs.push((i, j, v));
            }
        }
    }
    pairs.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut out = Vec::new();
    for (i, j, v) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j, v));
        }
    }
    out
}

/// Per-image consistency counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub detections_original: usize,
    pub detections_translated: usize,
    pub matched: usize,
    pub iou_sum: f64,
    pub same_class: usize,
}

impl PairStats {
    /// Slots a perfect translation would fill: the larger detection count.
    pub fn slots(&self) -> usize {
        self.detections_original.max(self.detections_translated)
    }
}

pub fn pair_stats(original: &Detections, translated: &Detections) -> PairStats {
    let m = greedy_match(&original.boxes, &translated.boxes, MATCH_IOU);
    PairStats {
        detections_original: original.len(),
        detections_translated: translated.len(),
        matched: m.len(),
        iou_sum: m.iter().map(|p| p.2).sum(),
        same_class: m
            .iter()
            .filter(|(i, j, _)| original.classes[*i] == translated.classes[*j])
            .count(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    /// Summed matched IoU over summed slots; unmatched slots count as 0.
    pub miou: f64,
    /// Matched pairs with equal class over summed slots.
    pub class_agreement: f64,
    pub per_image: Vec<PairStats>,
}

/// Compare detections on originals against detections on their
/// translations. With no detections anywhere both scores are 1.
pub fn consistency_from_detections(original: &[Detections], translated: &[Detections]) -> Result<Consistency> {
    if original.is_empty() {
        return Err(Error::InvalidArgument("consistency of an empty image set".into()));
    }
    if original.len() != translated.len() {
        return Err(Error::InvalidArgument(format!(
            "{} originals but {} translations",
            original.len(),
            translated.len()
        )));
    }
    let per_image: Vec<PairStats> = original.iter().zip(translated).map(|(a, b)| pair_stats(a, b)).collect();
    let slots: usize = per_image.iter().map(PairStats::slots).sum();
    let (miou, class_agreement) = if slots == 0 {
        (1.0, 1.0)
    } else {
        (
            per_image.iter().map(|s| s.iou_sum).sum::<f64>() / slots as f64,
            per_image.iter().map(|s| s.same_class).sum::<usize>() as f64 / slots as f64,
        )
    };
    Ok(Consistency {
        miou,
        class_agreement,
        per_image,
    })
}

pub fn detection_consistency(
    detector: &Detector<f32>,
    originals: &[Tensor<f32>],
    translated: &[Tensor<f32>],
    nms: &NmsConfig,
) -> Result<Consistency> {
    if originals.len() != translated.len() {
        return Err(Error::InvalidArgument(format!(
            "{} originals but {} translations",
            originals.len(),
            translated.len()
        )));
    }
    if originals.is_empty() {
        return Err(Error::InvalidArgument("consistency of an empty image set".into()));
    }
    let a = detector.detect_all(originals, 32, nms)?;
    let b = detector.detect_all(translated, 32, nms)?;
    consistency_from_detections(&a, &b)
}

/// Detector mAP@0.5 on `images` against their own labels.
pub fn gt_preservation(detector: &Detector<f32>, images: &[LabeledImage], nms: &NmsConfig) -> Result<f64> {
    let pixels: Vec<Tensor<f32>> = images.iter().map(|i| i.pixels.clone()).collect();
    let dets = detector.detect_all(&pixels, 32, nms)?;
    map_of(detector, &dets, images)
}

fn map_of(detector: &Detector<f32>, dets: &[Detections], images: &[LabeledImage]) -> Result<f64> {
    let boxes: Vec<Vec<BBox>> = images.iter().map(|i| i.boxes.clone()).collect();
    let classes: Vec<Vec<usize>> = images.iter().map(|i| i.classes.clone()).collect();
    Ok(evaluate_map(dets, &boxes, &classes, detector.config.num_classes, MATCH_IOU)?.map)
}

/// One evaluated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub seed: u64,
    pub ground_truth: usize,
    #[serde(flatten)]
    pub stats: PairStats,
    /// Classifier probability that the translation is real.
    pub realism: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub consistency_miou: f64,
    pub class_agreement: f64,
    pub gt_map_translated: f64,
    pub gt_map_source: f64,
    pub domain_score: f64,
    /// Domain score of the untranslated source images.
    pub domain_score_source: f64,
    pub domain_val_accuracy: f64,
    /// False when the domain classifier missed [`MIN_VAL_ACCURACY`].
    pub domain_valid: bool,
    pub records: Vec<ImageRecord>,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// `(name, value)` for every scalar metric, in report order.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("consistency_miou", self.consistency_miou),
            ("class_agreement", self.class_agreement),
            ("gt_map_translated", self.gt_map_translated),
            ("gt_map_source", self.gt_map_source),
            ("domain_score", self.domain_score),
            ("domain_score_source", self.domain_score_source),
            ("domain_val_accuracy", self.domain_val_accuracy),
            ("domain_valid", if self.domain_valid { 1.0 } else { 0.0 }),
        ]
    }
}

/// Inputs to a full evaluation.
#[derive(Clone, Debug)]
pub struct EvalInputs<'a> {
    /// Sim-domain images with labels, translated by the generator.
    pub source: &'a [LabeledImage],
    /// Unpaired sim and real images for the domain classifier.
    pub domain_sim: &'a [Tensor<f32>],
    pub domain_real: &'a [Tensor<f32>],
}

/// Run everything: translate `source` with `bundle`'s sim-to-real generator
/// (or keep it unchanged when `bundle` is `None`), then score the result.
pub fn evaluate(
    detector: &Detector<f32>,
    bundle: Option<&GanBundle<f32>>,
    inputs: &EvalInputs,
    domain: &DomainConfig,
    seed: u64,
) -> Result<(EvalReport, Vec<Tensor<f32>>)> {
    if inputs.source.is_empty() {
        return Err(Error::InvalidArgument("no source images to evaluate".into()));
    }
    if let Some(bad) = inputs.source.iter().find(|i| i.domain != Style::Sim) {
        return Err(Error::InvalidArgument(format!("evaluation source image {} is not sim", bad.seed)));
    }
    let originals: Vec<Tensor<f32>> = inputs.source.iter().map(|i| i.pixels.clone()).collect();
    let translated = match bundle {
        Some(b) => translate_batched(b, &originals)?,
        None => originals.clone(),
    };
    let nms = NmsConfig::default();
    let det_orig = detector.detect_all(&originals, 32, &nms)?;
    let det_trans = detector.detect_all(&translated, 32, &nms)?;
    let consistency = consistency_from_detections(&det_orig, &det_trans)?;
    let gt_map_source = map_of(detector, &det_orig, inputs.source)?;
    let gt_map_translated = map_of(detector, &det_trans, inputs.source)?;

    let clf = train_domain_classifier(inputs.domain_sim, inputs.domain_real, domain, seed)?;
    let realism = clf.predict(&translated)?;
    let domain_score =
        realism.iter().filter(|&&p| p >= DECISION_THRESHOLD).count() as f64 / realism.len() as f64;
    let domain_score_source = clf.score(&originals)?;

    let records = inputs
        .source
        .iter()
        .zip(consistency.per_image.iter())
        .zip(&realism)
        .map(|((img, stats), &r)| ImageRecord {
            seed: img.seed,
            ground_truth: img.boxes.len(),
            stats: stats.clone(),
            realism: r,
        })
        .collect();
    let report = EvalReport {
        consistency_miou: consistency.miou,
        class_agreement: consistency.class_agreement,
        gt_map_translated,
        gt_map_source,
        domain_score,
        domain_score_source,
        domain_val_accuracy: clf.val_accuracy,
        domain_valid: clf.is_valid(),
        records,
        config: serde_json::json!({
            "seed": seed,
            "images": inputs.source.len(),
            "match_iou": MATCH_IOU,
            "nms": nms,
            "domain": domain,
            "detector": detector.config,
            "gan": bundle.map(|b| serde_json::json!({"config": b.config, "step": b.step})),
            "thresholds_note": "all thresholds are repository-defined benchmarks",
        }),
    };
    Ok((report, translated))
}

/// Sim-to-real translation of individual images in batches of 32.
pub fn translate_batched(bundle: &GanBundle<f32>, images: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let t = bundle.translate(G, &Tensor::stack(chunk)?)?;
        for n in 0..chunk.len() {
            out.push(t.index_outer(n)?);
        }
    }
    Ok(out)
}
