mod common;

use retinagan::detector::{
    decode_nms, detector_training_loss, encode, match_anchors, Assignment, BBox, Detector, DetectorConfig, HeadOutputs,
    LevelOutput, NmsConfig, TrainTargets,
};
use retinagan::losses::focal_loss;
use retinagan::scene::{make_image, SceneConfig, Style};
use retinagan::{Graph, Tensor};

fn level_sizes(det: &Detector<f64>) -> Vec<usize> {
    det.grid.levels.iter().map(|l| l.anchors.len()).collect()
}

/// Constant head outputs built from flat per-anchor logits and offsets.
fn heads(g: &mut Graph<f64>, sizes: &[usize], k: usize, cls: &[f64], boxes: &[f64]) -> HeadOutputs {
    let mut start = 0;
    let levels = sizes
        .iter()
        .map(|&a| {
            let c = Tensor::new(&[1, a, k], cls[start * k..(start + a) * k].to_vec()).unwrap();
            let b = Tensor::new(&[1, a, 4], boxes[start * 4..(start + a) * 4].to_vec()).unwrap();
            start += a;
            LevelOutput {
                cls: g.constant(c),
                boxes: g.constant(b),
            }
        })
        .collect();
    HeadOutputs { levels }
}

#[test]
fn output_shapes_follow_the_anchor_grid() {
    let det = Detector::<f32>::new(DetectorConfig::default(), 1).unwrap();
    assert_eq!(det.grid.len(), 240);
    let img = make_image(0, Style::Sim, &SceneConfig::default()).unwrap().pixels;
    let batch = Tensor::stack(&[img.clone(), img]).unwrap();
    let out = det.predict(&batch).unwrap();
    let total: usize = out.cls.iter().map(|t| t.shape()[1]).sum();
    assert_eq!(total, 240);
    for (c, b) in out.cls.iter().zip(&out.boxes) {
        assert_eq!(c.shape()[2], det.config.num_classes);
        assert_eq!(b.shape()[2], 4);
    }
    assert_eq!(out.image(0), out.image(1), "identical images give identical outputs");
}

#[test]
fn perfect_outputs_give_near_zero_loss() {
    let det = Detector::<f64>::new(DetectorConfig::default(), 2).unwrap();
    let k = det.config.num_classes;
    let img = make_image(3, Style::Sim, &SceneConfig::default()).unwrap();
    let m = match_anchors(&det.grid, &img.boxes, &img.classes).unwrap();
    let mut cls = vec![-30.0; det.grid.len() * k];
    let mut boxes = vec![0.0; det.grid.len() * 4];
    for (a, asg) in m.assignments.iter().enumerate() {
        if let Assignment::Positive(_) = asg {
            cls[a * k + m.classes[a].unwrap()] = 30.0;
            boxes[a * 4..a * 4 + 4].copy_from_slice(&m.box_targets[a]);
        }
    }
    let targets = TrainTargets::new(std::slice::from_ref(&m), k).unwrap();
    let mut g = Graph::new();
    let out = heads(&mut g, &level_sizes(&det), k, &cls, &boxes);
    let loss = detector_training_loss(&mut g, &out, &targets, 2.0, 0.25, 1.0).unwrap();
    assert!(g.value(loss).item().unwrap() < 1e-9);
}

#[test]
fn no_positives_leaves_only_the_class_term() {
    let det = Detector::<f64>::new(DetectorConfig::default(), 3).unwrap();
    let k = det.config.num_classes;
    let m = match_anchors(&det.grid, &[], &[]).unwrap();
    let n = det.grid.len();
    let cls: Vec<f64> = (0..n * k).map(|i| ((i * 37) % 17) as f64 * 0.3 - 2.5).collect();
    let boxes: Vec<f64> = (0..n * 4).map(|i| ((i * 13) % 11) as f64 * 0.2 - 1.0).collect();
    let targets = TrainTargets::new(std::slice::from_ref(&m), k).unwrap();
    let mut g = Graph::new();
    let out = heads(&mut g, &level_sizes(&det), k, &cls, &boxes);
    let loss = detector_training_loss(&mut g, &out, &targets, 2.0, 0.25, 1.0).unwrap();
    let oracle: f64 = cls.iter().map(|&z| focal_loss(0.0, common::sigmoid(z), 2.0, 0.25).unwrap()).sum();
    assert!((g.value(loss).item().unwrap() - oracle).abs() < 1e-9);
}

#[test]
fn decode_recovers_encoded_boxes() {
    let det = Detector::<f64>::new(DetectorConfig::default(), 4).unwrap();
    let k = det.config.num_classes;
    let gt: BBox = [0.21, 0.3, 0.52, 0.49];
    let (a, anchor) = det
        .grid
        .all()
        .enumerate()
        .max_by(|x, y| common::iou_exact(&x.1.to_box(), &gt).total_cmp(&common::iou_exact(&y.1.to_box(), &gt)))
        .unwrap();
    let mut cls = vec![-20.0; det.grid.len() * k];
    cls[a * k + 2] = 5.0;
    let mut boxes = vec![0.0; det.grid.len() * 4];
    boxes[a * 4..a * 4 + 4].copy_from_slice(&encode(anchor, &gt));
    let dets = decode_nms(&cls, &boxes, &det.grid, k, &NmsConfig::default()).unwrap();
    assert_eq!(dets.len(), 1);
    assert_eq!(dets.classes[0], 2);
    for c in 0..4 {
        assert!((dets.boxes[0][c] - gt[c]).abs() < 1e-6);
    }
}

#[test]
fn max_detections_caps_output() {
    let det = Detector::<f64>::new(DetectorConfig::default(), 5).unwrap();
    let k = det.config.num_classes;
    let cls = vec![3.0; det.grid.len() * k];
    let boxes = vec![0.0; det.grid.len() * 4];
    let cfg = NmsConfig::default();
    let dets = decode_nms(&cls, &boxes, &det.grid, k, &cfg).unwrap();
    assert_eq!(dets.len(), cfg.max_detections);
    assert!(dets.boxes.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    assert!(decode_nms(&cls[1..], &boxes, &det.grid, k, &cfg).is_err());
}
