//! Decoding, non-maximum suppression and mean average precision.

use serde::{Deserialize, Serialize};

use super::anchors::{decode, iou, AnchorGrid, BBox};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub score_threshold: f64,
    pub iou_threshold: f64,
    pub max_detections: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            score_threshold: 0.05,
            iou_threshold: 0.5,
            max_detections: 20,
        }
    }
}

/// Final detections for one image, sorted by descending score.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Detections {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    pub classes: Vec<usize>,
}

impl Detections {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Greedy NMS over `(box, score)` candidates. Returns kept indices in
/// descending score order; ties keep the earlier candidate first.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) < iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// Turn one image's raw head outputs into detections: sigmoid scores above
/// the threshold, decoded and clipped boxes, per-class NMS, top-k overall.
///
/// `cls` holds `anchors * num_classes` logits, `boxes` `anchors * 4` offsets.
pub fn decode_nms(
    cls: &[f64],
    boxes: &[f64],
    grid: &AnchorGrid,
    num_classes: usize,
    config: &NmsConfig,
) -> Result<Detections> {
    let n = grid.len();
    if cls.len() != n * num_classes || boxes.len() != n * 4 {
        return Err(Error::Shape(format!(
            "{} anchors need {} logits and {} offsets, got {} and {}",
            n,
            n * num_classes,
            n * 4,
            cls.len(),
            boxes.len()
        )));
    }
    let decoded: Vec<BBox> = grid
        .all()
        .enumerate()
        .map(|(a, anchor)| {
            let d = [boxes[a * 4], boxes[a * 4 + 1], boxes[a * 4 + 2], boxes[a * 4 + 3]];
            decode(anchor, &d).map(|v| v.clamp(0.0, 1.0))
        })
        .collect();

    let mut all: Vec<(BBox, f64, usize)> = Vec::new();
    for k in 0..num_classes {
        let mut cand_boxes = Vec::new();
        let mut cand_scores = Vec::new();
        for a in 0..n {
            let s = sigmoid(cls[a * num_classes + k]);
            let b = decoded[a];
            if s > config.score_threshold && b[2] > b[0] && b[3] > b[1] {
                cand_boxes.push(b);
                cand_scores.push(s);
            }
        }
        for i in nms(&cand_boxes, &cand_scores, config.iou_threshold) {
            all.push((cand_boxes[i], cand_scores[i], k));
        }
    }
    all.sort_by(|a, b| b.1.total_cmp(&a.1));
    all.truncate(config.max_detections);
    Ok(Detections {
        boxes: all.iter().map(|d| d.0).collect(),
        scores: all.iter().map(|d| d.1).collect(),
        classes: all.iter().map(|d| d.2).collect(),
    })
}

/// Mean AP over classes that have ground truth, plus per-class AP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Average precision at an IoU threshold, as the exact area under the
/// step-wise precision/recall curve. Detections are matched greedily in
/// score order to the best-overlapping unmatched box of their class.
pub fn evaluate_map(
    detections: &[Detections],
    gt_boxes: &[Vec<BBox>],
    gt_classes: &[Vec<usize>],
    num_classes: usize,
    iou_threshold: f64,
) -> Result<MapResult> {
    if detections.len() != gt_boxes.len() || gt_boxes.len() != gt_classes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} detection sets for {} ground-truth images",
            detections.len(),
            gt_boxes.len()
        )));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let n_gt: usize = gt_classes.iter().map(|c| c.iter().filter(|&&x| x == k).count()).sum();
        if n_gt == 0 {
            per_class.push(None);
            continue;
        }
        // (score, image, detection index), highest score first.
        let mut dets: Vec<(f64, usize, usize)> = Vec::new();
        for (img, d) in detections.iter().enumerate() {
            for i in 0..d.len() {
                if d.classes[i] == k {
                    dets.push((d.scores[i], img, i));
                }
            }
        }
        dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used: Vec<Vec<bool>> = gt_boxes.iter().map(|b| vec![false; b.len()]).collect();
        let (mut tp, mut ap) = (0usize, 0.0);
        for (rank, &(_, img, i)) in dets.iter().enumerate() {
            let det_box = &detections[img].boxes[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, gb) in gt_boxes[img].iter().enumerate() {
                if gt_classes[img][j] != k || used[img][j] {
                    continue;
                }
                let o = iou(det_box, gb);
                if o >= iou_threshold && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                used[img][j] = true;
                tp += 1;
                // Recall rises by 1/n_gt at this rank's precision.
                ap += (tp as f64 / (rank + 1) as f64) / n_gt as f64;
            }
        }
        per_class.push(Some(ap));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MapResult { map, per_class })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dets(items: &[(BBox, f64, usize)]) -> Detections {
        Detections {
            boxes: items.iter().map(|d| d.0).collect(),
            scores: items.iter().map(|d| d.1).collect(),
            classes: items.iter().map(|d| d.2).collect(),
        }
    }

    #[test]
    fn perfect_detections_score_one() {
        let gt = vec![vec![[0.1, 0.1, 0.4, 0.4], [0.5, 0.5, 0.9, 0.8]]];
        let cls = vec![vec![0, 2]];
        let d = vec![dets(&[(gt[0][0], 1.0, 0), (gt[0][1], 1.0, 2)])];
        let r = evaluate_map(&d, &gt, &cls, 4, 0.5).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.per_class[1], None);
    }

    #[test]
    fn no_detections_score_zero() {
        let gt = vec![vec![[0.1, 0.1, 0.4, 0.4]]];
        let r = evaluate_map(&[Detections::default()], &gt, &[vec![1]], 4, 0.5).unwrap();
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn crafted_precision_recall_area() {
        // Scores 0.9 (hit), 0.8 (miss), 0.7 (hit) against two boxes:
        // precision 1 at recall 1/2, then 2/3 at recall 1.
        let gt = vec![vec![[0.0, 0.0, 0.2, 0.2], [0.5, 0.5, 0.7, 0.7]]];
        let d = vec![dets(&[
            ([0.0, 0.0, 0.2, 0.2], 0.9, 0),
            ([0.8, 0.8, 0.9, 0.9], 0.8, 0),
            ([0.5, 0.5, 0.7, 0.7], 0.7, 0),
        ])];
        let r = evaluate_map(&d, &gt, &[vec![0, 0]], 1, 0.5).unwrap();
        assert!((r.map - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_candidates_collapse() {
        let b = [0.1, 0.1, 0.3, 0.3];
        assert_eq!(nms(&[b, b], &[0.6, 0.6], 0.5), vec![0]);
    }
}
