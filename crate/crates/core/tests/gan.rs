mod common;

use retinagan::detector::{Detector, DetectorConfig};
use retinagan::gan::{
    adversarial_losses, cycle_loss, discriminator_forward, retinagan_total, Batch, GanBundle, GanConfig, DX, G,
};
use retinagan::losses::LossParams;
use retinagan::scene::{make_image, SceneConfig, Style};
use retinagan::tensor::AdamConfig;
use retinagan::{Graph, Tensor};

fn scalar(g: &Graph<f64>, v: retinagan::Var) -> f64 {
    g.value(v).item().unwrap()
}

#[test]
fn lsgan_reference_values() {
    let mut g = Graph::<f64>::new();
    let ones = g.constant(Tensor::full(&[2, 1, 4, 4], 1.0));
    let zeros = g.constant(Tensor::zeros(&[2, 1, 4, 4]));
    let half = g.constant(Tensor::full(&[2, 1, 4, 4], 0.5));
    let (d, _) = adversarial_losses(&mut g, ones, zeros).unwrap();
    assert_eq!(scalar(&g, d), 0.0);
    let (_, gl) = adversarial_losses(&mut g, zeros, ones).unwrap();
    assert_eq!(scalar(&g, gl), 0.0);
    let (d, gl) = adversarial_losses(&mut g, half, half).unwrap();
    assert!((scalar(&g, d) - 0.25).abs() < 1e-15);
    assert!((scalar(&g, gl) - 0.25).abs() < 1e-15);
}

#[test]
fn cycle_loss_is_mean_absolute_error() {
    let mut g = Graph::<f64>::new();
    let x = Tensor::from_fn(&[1, 3, 4, 4], |i| (i as f64 * 0.07).fract());
    let xv = g.constant(x.clone());
    let shifted = g.constant(x.map(|v| v + 0.1));
    let perfect = cycle_loss(&mut g, xv, xv, xv, xv).unwrap();
    assert_eq!(scalar(&g, perfect), 0.0);
    let one_side = cycle_loss(&mut g, xv, shifted, xv, xv).unwrap();
    assert!((scalar(&g, one_side) - 0.1).abs() < 1e-12);
}

#[test]
fn discriminator_sees_a_global_shift() {
    let bundle = GanBundle::<f64>::new(GanConfig::default(), AdamConfig::default(), 1).unwrap();
    let mut b = bundle.clone();
    b.power_iterate().unwrap();
    let mut g = Graph::new();
    let p = b.discriminators.bind(&mut g, false);
    let a = g.constant(Tensor::full(&[1, 3, 64, 64], 0.3));
    let c = g.constant(Tensor::full(&[1, 3, 64, 64], 0.6));
    let sa = discriminator_forward(&mut g, &p, DX, b.spectral(DX), a).unwrap();
    let sc = discriminator_forward(&mut g, &p, DX, b.spectral(DX), c).unwrap();
    assert_eq!(g.shape(sa), &[1, 1, 4, 4]);
    assert_ne!(g.value(sa), g.value(sc));
}

#[test]
fn generator_is_shape_preserving_and_deterministic() {
    let bundle = GanBundle::<f32>::new(GanConfig::default(), AdamConfig::default(), 2).unwrap();
    let img = make_image(1, Style::Sim, &SceneConfig::default()).unwrap().pixels;
    let batch = Tensor::stack(&[img]).unwrap();
    let a = bundle.translate(G, &batch).unwrap();
    let b = bundle.translate(G, &batch).unwrap();
    assert_eq!(a.shape(), batch.shape());
    assert_eq!(a, b);
}

fn batch() -> Batch<f32> {
    let cfg = SceneConfig::default();
    let pick = |style, base: u64| {
        Tensor::stack(&(0..2).map(|s| make_image(base + s, style, &cfg).unwrap().pixels).collect::<Vec<_>>()).unwrap()
    };
    Batch {
        x: pick(Style::Sim, 0),
        y: pick(Style::Real, 50),
    }
}

/// A bundle whose generators have moved away from the constant
/// initialization, so every term is non-trivial.
fn trained_bundle() -> GanBundle<f32> {
    let mut bundle = GanBundle::<f32>::new(GanConfig::default(), AdamConfig::default(), 3).unwrap();
    let b = batch();
    let params = LossParams {
        lambda_prcp: 0.0,
        ..LossParams::default()
    };
    for _ in 0..3 {
        retinagan::gan::train_step(&mut bundle, None, &b, &params).unwrap();
    }
    bundle
}

#[test]
fn total_is_the_weighted_sum_of_its_parts() {
    let bundle = trained_bundle();
    let det = Detector::<f32>::new(DetectorConfig::default(), 4).unwrap();
    let params = LossParams::default();
    let r = retinagan_total(&batch(), &bundle, Some(&det), &params).unwrap();
    assert!(r.prcp > 0.0 && r.cycle > 0.0);
    let sum = params.lambda_gan * (r.g_adv_xy + r.g_adv_yx) + params.lambda_cycle * r.cycle + params.lambda_prcp * r.prcp;
    assert!((r.total_g - sum).abs() <= 1e-6 * r.total_g.abs().max(1.0), "{} vs {sum}", r.total_g);
    assert!((r.total_d - (r.d_x + r.d_y)).abs() < 1e-12);
}

#[test]
fn zero_lambda_matches_plain_cycle_gan() {
    let bundle = trained_bundle();
    let det = Detector::<f32>::new(DetectorConfig::default(), 4).unwrap();
    let params = LossParams {
        lambda_prcp: 0.0,
        ..LossParams::default()
    };
    let with = retinagan_total(&batch(), &bundle, Some(&det), &params).unwrap();
    let without = retinagan_total(&batch(), &bundle, None, &params).unwrap();
    assert_eq!(with, without);
    assert_eq!(with.prcp, 0.0);
}

#[test]
fn spectral_norm_bounds_every_discriminator_weight() {
    let mut bundle = trained_bundle().cast::<f64>();
    for _ in 0..500 {
        bundle.power_iterate().unwrap();
    }
    for prefix in [DX, retinagan::gan::DY] {
        for (i, s) in bundle.spectral(prefix).iter().enumerate() {
            let w = bundle.discriminators.get(&format!("{prefix}.conv{i}.w")).unwrap();
            let rows = w.shape()[0];
            let sigma = s.sigma(w).unwrap();
            let normalized: Vec<f64> = w.data().iter().map(|v| v / sigma).collect();
            let top = common::sigma_max(&normalized, rows, w.numel() / rows);
            assert!(top <= 1.0 + 1e-3, "{prefix}.conv{i}: {top}");
        }
    }
}
