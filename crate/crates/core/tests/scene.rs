use retinagan::scene::{
    export_dataset, generate_dataset, load_dataset, make_image, make_pair, read_manifest, render, sample_scene,
    SceneConfig, Scene, Style, MANIFEST,
};

fn channel_variance(pixels: &[f32], hw: usize, c: usize) -> f64 {
    let ch = &pixels[c * hw..(c + 1) * hw];
    let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
    ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / hw as f64
}

#[test]
fn class_frequencies_are_uniform() {
    let cfg = SceneConfig::default();
    let mut counts = vec![0usize; cfg.num_classes];
    for seed in 0..1000 {
        for c in sample_scene(seed, &cfg).unwrap().classes() {
            counts[c] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let expected = 1.0 / cfg.num_classes as f64;
    for (c, &n) in counts.iter().enumerate() {
        let freq = n as f64 / total as f64;
        assert!((freq - expected).abs() <= 0.05, "class {c}: {freq:.4} vs {expected}");
    }
}

#[test]
fn sim_backgrounds_are_flatter_than_real() {
    let cfg = SceneConfig {
        min_objects: 0,
        max_objects: 0,
        ..SceneConfig::default()
    };
    let hw = cfg.image_size * cfg.image_size;
    let (mut sim, mut real) = ([0.0; 3], [0.0; 3]);
    for seed in 0..100 {
        let (s, r) = make_pair(seed, &cfg).unwrap();
        for c in 0..3 {
            sim[c] += channel_variance(s.pixels.data(), hw, c);
            real[c] += channel_variance(r.pixels.data(), hw, c);
        }
    }
    for c in 0..3 {
        assert!(sim[c] < real[c], "channel {c}: sim {} real {}", sim[c], real[c]);
    }
}

#[test]
fn geometry_is_style_invariant_across_seeds() {
    let cfg = SceneConfig::default();
    for seed in 0..20 {
        let scene: Scene = sample_scene(seed, &cfg).unwrap();
        let a = render(&scene, Style::Sim, seed).unwrap();
        let b = render(&scene, Style::Real, seed + 1).unwrap();
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.classes, b.classes);
        assert_eq!(a.boxes, scene.boxes());
    }
}

#[test]
fn export_then_load_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SceneConfig::default();
    let images: Vec<_> = (0..5).map(|s| make_image(s, Style::Real, &cfg).unwrap()).collect();
    let manifest = export_dataset(&images, tmp.path()).unwrap();
    assert_eq!(manifest, tmp.path().join(MANIFEST));
    let records = read_manifest(&manifest).unwrap();
    assert_eq!(records.len(), 5);
    let loaded = load_dataset(tmp.path()).unwrap();
    for (a, b) in images.iter().zip(&loaded) {
        assert_eq!((a.seed, &a.boxes, &a.classes, a.domain), (b.seed, &b.boxes, &b.classes, b.domain));
        // 8-bit PNG storage.
        let worst = a.pixels.data().iter().zip(b.pixels.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "{worst}");
    }
    // Re-exporting the loaded set writes an identical manifest.
    let again = tempfile::tempdir().unwrap();
    let m2 = export_dataset(&loaded, again.path()).unwrap();
    assert_eq!(std::fs::read(&manifest).unwrap(), std::fs::read(&m2).unwrap());
}

#[test]
fn paired_export_shares_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let seeds: Vec<u64> = (10..16).collect();
    let manifest = generate_dataset(tmp.path(), &seeds, &[Style::Sim, Style::Real], &SceneConfig::default()).unwrap();
    let records = read_manifest(&manifest).unwrap();
    assert_eq!(records.len(), 2 * seeds.len());
    for &seed in &seeds {
        let same: Vec<_> = records.iter().filter(|r| r.seed == seed).collect();
        assert_eq!(same.len(), 2);
        assert_ne!(same[0].domain, same[1].domain);
        assert_eq!(same[0].boxes, same[1].boxes);
        assert_eq!(same[0].classes, same[1].classes);
    }
}

#[test]
fn generation_is_deterministic() {
    let cfg = SceneConfig::default();
    for style in [Style::Sim, Style::Real] {
        assert_eq!(make_image(42, style, &cfg).unwrap(), make_image(42, style, &cfg).unwrap());
    }
    assert_ne!(make_image(42, Style::Real, &cfg).unwrap().pixels, make_image(43, Style::Real, &cfg).unwrap().pixels);
}
