mod common;

use retinagan::detector::{HeadOutputs, LevelOutput};
use retinagan::losses::{fcl, fcl_class_term, huber_box, pair_prcp_loss, LossParams};
use retinagan::{Graph, Tensor};

fn level(g: &mut Graph<f64>, cls: Vec<f64>, boxes: Vec<f64>, a: usize, k: usize) -> LevelOutput {
    LevelOutput {
        cls: g.constant(Tensor::new(&[1, a, k], cls).unwrap()),
        boxes: g.constant(Tensor::new(&[1, a, 4], boxes).unwrap()),
    }
}

#[test]
fn identical_heads_cost_nothing() {
    let mut g = Graph::new();
    let cls: Vec<f64> = (0..12).map(|i| i as f64 * 0.4 - 2.0).collect();
    let boxes: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
    let a = HeadOutputs {
        levels: vec![level(&mut g, cls.clone(), boxes.clone(), 6, 2)],
    };
    let b = HeadOutputs {
        levels: vec![level(&mut g, cls, boxes, 6, 2)],
    };
    let v = pair_prcp_loss(&mut g, &a, &b, &LossParams::default()).unwrap();
    assert_eq!(g.value(v).item().unwrap(), 0.0);
}

#[test]
fn zero_reference_probability_masks_box_shift() {
    let mut g = Graph::new();
    // Anchor 1 has a saturated negative logit in the reference.
    let cls = vec![2.0, -1.0, -1000.0, -1000.0, 0.5, 0.0];
    let boxes = vec![0.1; 12];
    let mut shifted = boxes.clone();
    shifted[4..8].copy_from_slice(&[3.0, -2.0, 1.0, 0.5]);
    let a = HeadOutputs {
        levels: vec![level(&mut g, cls.clone(), boxes, 3, 2)],
    };
    let b = HeadOutputs {
        levels: vec![level(&mut g, cls, shifted, 3, 2)],
    };
    let v = pair_prcp_loss(&mut g, &a, &b, &LossParams::default()).unwrap();
    // The class term sees p clamped to 1e-7 against y = 0, about 7e-22.
    assert!(g.value(v).item().unwrap() < 1e-20);
}

#[test]
fn all_zero_reference_is_finite() {
    let mut g = Graph::new();
    let y = g.constant(Tensor::zeros(&[2, 6, 2]));
    let p = g.constant(Tensor::full(&[2, 6, 2], 0.3));
    let v = fcl_class_term(&mut g, y, p, 2.0, 0.25).unwrap();
    let expected = 12.0 * fcl(0.0, 0.3, 2.0, 0.25);
    assert!((g.value(v).item().unwrap() - expected).abs() < 1e-12);
    let same = fcl_class_term(&mut g, p, p, 2.0, 0.25).unwrap();
    assert_eq!(g.value(same).item().unwrap(), 0.0);
}

#[test]
fn huber_box_branches_and_weights() {
    let mut g = Graph::new();
    let r = g.constant(Tensor::zeros(&[1, 2, 4]));
    let c = g.constant(Tensor::new(&[1, 2, 4], vec![1.0, 0.0, 0.0, 0.0, -3.0, 0.5, 0.0, 0.0]).unwrap());
    let w = g.constant(Tensor::new(&[1, 2], vec![0.5, 2.0]).unwrap());
    let v = huber_box(&mut g, r, c, w, 1.0).unwrap();
    let per_anchor = [common::huber(1.0, 1.0), common::huber(-3.0, 1.0) + common::huber(0.5, 1.0)];
    let expected = (0.5 * per_anchor[0] + 2.0 * per_anchor[1]) / 2.5;
    assert!((g.value(v).item().unwrap() - expected).abs() < 1e-12);
    let zero = huber_box(&mut g, c, c, w, 1.0).unwrap();
    assert_eq!(g.value(zero).item().unwrap(), 0.0);
}

mod properties {
    use proptest::prelude::*;
    use retinagan::detector::iou;
    use retinagan::losses::{balanced_ce, fcl};

    proptest! {
        #[test]
        fn fcl_is_nonnegative_and_bounded_by_balanced_ce(
            y in 0.0f64..=1.0, p in 1e-6f64..1.0 - 1e-6, gamma in 0.0f64..5.0, alpha in 0.0f64..=1.0,
        ) {
            let v = fcl(y, p, gamma, alpha);
            prop_assert!(v >= 0.0);
            prop_assert!(v <= balanced_ce(y, p, alpha) + 1e-15);
        }

        #[test]
        fn iou_is_symmetric_and_bounded(
            a in (0.0f64..0.5, 0.0f64..0.5, 0.01f64..0.5, 0.01f64..0.5),
            b in (0.0f64..0.5, 0.0f64..0.5, 0.01f64..0.5, 0.01f64..0.5),
        ) {
            let ba = [a.0, a.1, a.0 + a.2, a.1 + a.3];
            let bb = [b.0, b.1, b.0 + b.2, b.1 + b.3];
            let v = iou(&ba, &bb);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&bb, &ba));
            prop_assert!((iou(&ba, &ba) - 1.0).abs() < 1e-12);
        }
    }
}
