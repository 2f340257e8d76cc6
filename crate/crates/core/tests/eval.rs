use retinagan::detector::{BBox, Detections, Detector, DetectorConfig, NmsConfig};
use retinagan::eval::{
    consistency_from_detections, emit_report, evaluate, gt_preservation, overlay_strip, DomainConfig, EvalInputs,
    EvalReport,
};
use retinagan::scene::{make_image, LabeledImage, SceneConfig, Style};
use retinagan::Tensor;

fn dets(boxes: &[BBox], classes: &[usize]) -> Detections {
    Detections {
        boxes: boxes.to_vec(),
        scores: vec![0.9; boxes.len()],
        classes: classes.to_vec(),
    }
}

#[test]
fn identical_detections_are_fully_consistent() {
    let d = vec![
        dets(&[[0.1, 0.1, 0.4, 0.3], [0.5, 0.5, 0.9, 0.8]], &[0, 2]),
        dets(&[[0.2, 0.6, 0.3, 0.9]], &[1]),
    ];
    let c = consistency_from_detections(&d, &d).unwrap();
    assert!((c.miou - 1.0).abs() < 1e-12);
    assert_eq!(c.class_agreement, 1.0);
}

#[test]
fn shifted_box_scores_its_iou() {
    let a = vec![dets(&[[0.2, 0.2, 0.6, 0.6]], &[1])];
    let b = vec![dets(&[[0.2, 0.3, 0.6, 0.7]], &[1])];
    let c = consistency_from_detections(&a, &b).unwrap();
    // Overlap 0.4 x 0.3 over union 0.16 + 0.16 - 0.12.
    assert!((c.miou - 0.12 / 0.2).abs() < 1e-12);
    assert_eq!(c.class_agreement, 1.0);
    let wrong_class = vec![dets(&[[0.2, 0.3, 0.6, 0.7]], &[3])];
    assert_eq!(consistency_from_detections(&a, &wrong_class).unwrap().class_agreement, 0.0);
}

#[test]
fn blank_translations_lose_everything() {
    let a = vec![dets(&[[0.2, 0.2, 0.6, 0.6], [0.7, 0.1, 0.9, 0.3]], &[0, 1]); 3];
    let blank = vec![dets(&[], &[]); 3];
    let c = consistency_from_detections(&a, &blank).unwrap();
    assert_eq!((c.miou, c.class_agreement), (0.0, 0.0));
    assert!(consistency_from_detections(&a, &blank[..1]).is_err());
}

#[test]
fn gray_images_preserve_nothing() {
    let det = Detector::<f32>::new(DetectorConfig::default(), 1).unwrap();
    let gray: Vec<LabeledImage> = (0..4)
        .map(|s| {
            let mut img = make_image(s, Style::Sim, &SceneConfig::default()).unwrap();
            img.pixels = Tensor::full(&[3, 64, 64], 0.5);
            img
        })
        .collect();
    assert_eq!(gt_preservation(&det, &gray, &NmsConfig::default()).unwrap(), 0.0);
}

fn quick_domain() -> DomainConfig {
    DomainConfig {
        steps: 5,
        batch_size: 4,
        ..DomainConfig::default()
    }
}

fn identity_report() -> (EvalReport, Vec<Tensor<f32>>, Vec<LabeledImage>) {
    let cfg = SceneConfig::default();
    let det = Detector::<f32>::new(DetectorConfig::default(), 2).unwrap();
    let source: Vec<LabeledImage> = (0..10).map(|s| make_image(s, Style::Sim, &cfg).unwrap()).collect();
    let dsim: Vec<Tensor<f32>> = (100..108).map(|s| make_image(s, Style::Sim, &cfg).unwrap().pixels).collect();
    let dreal: Vec<Tensor<f32>> = (200..208).map(|s| make_image(s, Style::Real, &cfg).unwrap().pixels).collect();
    let inputs = EvalInputs {
        source: &source,
        domain_sim: &dsim,
        domain_real: &dreal,
    };
    let (report, translated) = evaluate(&det, None, &inputs, &quick_domain(), 0).unwrap();
    (report, translated, source)
}

#[test]
fn identity_translation_matches_source_metrics() {
    let (report, translated, source) = identity_report();
    assert_eq!(report.gt_map_translated, report.gt_map_source);
    assert_eq!(report.consistency_miou, 1.0);
    assert_eq!(report.domain_score, report.domain_score_source);
    assert_eq!(report.records.len(), source.len());
    assert!(translated.iter().zip(&source).all(|(t, s)| *t == s.pixels));
}

#[test]
fn evaluation_requires_sim_sources() {
    let cfg = SceneConfig::default();
    let det = Detector::<f32>::new(DetectorConfig::default(), 3).unwrap();
    let real = vec![make_image(1, Style::Real, &cfg).unwrap()];
    let px = vec![real[0].pixels.clone()];
    let inputs = EvalInputs {
        source: &real,
        domain_sim: &px,
        domain_real: &px,
    };
    assert!(evaluate(&det, None, &inputs, &quick_domain(), 0).is_err());
}

#[test]
fn report_files() {
    let (report, translated, source) = identity_report();
    let originals: Vec<Tensor<f32>> = source.iter().map(|s| s.pixels.clone()).collect();
    let d = vec![dets(&[[0.1, 0.1, 0.5, 0.5]], &[0]); originals.len()];
    let tmp = tempfile::tempdir().unwrap();
    let written = emit_report(&report, &originals, &translated, &d, tmp.path()).unwrap();
    assert_eq!(written.len(), 2 + 8);

    let back: EvalReport = serde_json::from_slice(&std::fs::read(tmp.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(back, report);

    let csv = std::fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + report.metrics().len());

    let strip = overlay_strip(&originals[0], &translated[0], &d[0]).unwrap();
    assert_eq!(strip.shape(), &[3, 64, 3 * 64]);
    let png = image::open(tmp.path().join("overlays").join("00.png")).unwrap();
    assert_eq!((png.width(), png.height()), (192, 64));
}
