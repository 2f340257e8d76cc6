//! The desk-scale benchmark: fixed corpora, a detector trained on both
//! domains, and translation runs scored on held-out sim images.
//!
//! Every corpus comes from its own seed range so no two splits share a
//! scene. With a cache directory, trained detectors and generators are
//! stored and reused on the next call with the same settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{evaluate_map, Detector, DetectorConfig, DetectorTrainConfig, NmsConfig};
use crate::error::Result;
use crate::eval::{evaluate, DomainConfig, EvalInputs, EvalReport, MATCH_IOU};
use crate::gan::{GanBundle, LossReport};
use crate::scene::{corpus_seeds, make_image, make_pair, LabeledImage, SceneConfig, Style};
use crate::tensor::Tensor;
use crate::train::{load_bundle, load_detector, save_bundle, save_detector, train_retinagan, TrainConfig};

const DETECTOR_BASE: u64 = 0;
const PAIRED_BASE: u64 = 1 << 20;
const VALIDATION_BASE: u64 = 2 << 20;
const DOMAIN_BASE: u64 = 3 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    /// Images per domain in the training corpus.
    pub train_per_domain: usize,
    /// Scenes in the paired held-out set (two images each).
    pub paired_scenes: usize,
    /// Held-out sim images that get translated and scored.
    pub validation: usize,
    /// Images per domain for the realism classifier.
    pub domain_per_domain: usize,
    pub detector_steps: usize,
    pub detector_seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            train_per_domain: 1000,
            paired_scenes: 100,
            validation: 200,
            domain_per_domain: 200,
            detector_steps: 5000,
            detector_seed: 0,
        }
    }
}

/// All image sets of one benchmark instance.
pub struct Corpora {
    pub sim: Vec<LabeledImage>,
    pub real: Vec<LabeledImage>,
    pub paired: Vec<LabeledImage>,
    pub validation: Vec<LabeledImage>,
    pub domain_sim: Vec<Tensor<f32>>,
    pub domain_real: Vec<Tensor<f32>>,
}

impl Corpora {
    pub fn generate(config: &BenchmarkConfig, scene: &SceneConfig) -> Result<Self> {
        let images = |style, base, n| -> Result<Vec<LabeledImage>> {
            corpus_seeds(style, base, n).into_iter().map(|s| make_image(s, style, scene)).collect()
        };
        let mut paired = Vec::with_capacity(2 * config.paired_scenes);
        for s in corpus_seeds(Style::Sim, PAIRED_BASE, config.paired_scenes) {
            let (a, b) = make_pair(s, scene)?;
            paired.push(a);
            paired.push(b);
        }
        let pixels = |v: Vec<LabeledImage>| v.into_iter().map(|i| i.pixels).collect::<Vec<_>>();
        Ok(Corpora {
            sim: images(Style::Sim, DETECTOR_BASE, config.train_per_domain)?,
            real: images(Style::Real, DETECTOR_BASE, config.train_per_domain)?,
            paired,
            validation: images(Style::Sim, VALIDATION_BASE, config.validation)?,
            domain_sim: pixels(images(Style::Sim, DOMAIN_BASE, config.domain_per_domain)?),
            domain_real: pixels(images(Style::Real, DOMAIN_BASE, config.domain_per_domain)?),
        })
    }

    pub fn sim_pixels(&self) -> Vec<Tensor<f32>> {
        self.sim.iter().map(|i| i.pixels.clone()).collect()
    }

    pub fn real_pixels(&self) -> Vec<Tensor<f32>> {
        self.real.iter().map(|i| i.pixels.clone()).collect()
    }

    pub fn eval_inputs(&self) -> EvalInputs<'_> {
        EvalInputs {
            source: &self.validation,
            domain_sim: &self.domain_sim,
            domain_real: &self.domain_real,
        }
    }
}

/// mAP@0.5 of `detector` on `images` against their labels.
pub fn detector_map(detector: &Detector<f32>, images: &[LabeledImage]) -> Result<f64> {
    let pixels: Vec<Tensor<f32>> = images.iter().map(|i| i.pixels.clone()).collect();
    let dets = detector.detect_all(&pixels, 32, &NmsConfig::default())?;
    let boxes: Vec<_> = images.iter().map(|i| i.boxes.clone()).collect();
    let classes: Vec<_> = images.iter().map(|i| i.classes.clone()).collect();
    Ok(evaluate_map(&dets, &boxes, &classes, detector.config.num_classes, MATCH_IOU)?.map)
}

/// Train (or load from `cache`) the detector on both training corpora.
pub fn benchmark_detector(config: &BenchmarkConfig, corpora: &Corpora, cache: Option<&Path>) -> Result<Detector<f32>> {
    let path = cache.map(|c| c.join(format!("detector_s{}_n{}.ckpt", config.detector_seed, config.detector_steps)));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        return load_detector(p);
    }
    let mut detector = Detector::new(DetectorConfig::default(), config.detector_seed)?;
    let mut data = corpora.sim.clone();
    data.extend(corpora.real.iter().cloned());
    let cfg = DetectorTrainConfig {
        steps: config.detector_steps,
        seed: config.detector_seed,
        ..Default::default()
    };
    crate::detector::train_detector(&mut detector, &data, &cfg, |_, _| {})?;
    if let Some(p) = path {
        ensure_dir(&p)?;
        save_detector(&p, &detector)?;
    }
    Ok(detector)
}

fn ensure_dir(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| crate::Error::io(parent, e))?;
    }
    Ok(())
}

/// Cache file of a translation run, keyed by every config value.
pub fn run_cache_path(cache: &Path, config: &TrainConfig) -> PathBuf {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(config.to_config_string().as_bytes());
    let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    cache.join(format!("gan_s{}_l{}_{hex}.ckpt", config.seed, config.lambda_prcp))
}

/// Train (or load from `cache`) one translation run. The per-step loss log
/// is cached next to the checkpoint.
pub fn benchmark_run(
    config: &TrainConfig,
    corpora: &Corpora,
    detector: &Detector<f32>,
    cache: Option<&Path>,
) -> Result<(GanBundle<f32>, Vec<LossReport>)> {
    let path = cache.map(|c| run_cache_path(c, config));
    if let Some(p) = path.as_ref().filter(|p| p.exists() && p.with_extension("jsonl").exists()) {
        let log = p.with_extension("jsonl");
        let text = std::fs::read_to_string(&log).map_err(|e| crate::Error::io(&log, e))?;
        let reports = text
            .lines()
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<LossReport>, _>>()
            .map_err(|source| crate::Error::Json { path: log.clone(), source })?;
        return Ok((load_bundle(p)?.0, reports));
    }
    let det = (config.lambda_prcp != 0.0).then_some(detector);
    let out = train_retinagan(config, &corpora.sim_pixels(), &corpora.real_pixels(), det, None, None, |_| {})?;
    if let Some(p) = path {
        ensure_dir(&p)?;
        save_bundle(&p, &out.bundle, Some(config))?;
        let mut text = String::new();
        for r in &out.reports {
            text.push_str(&serde_json::to_string(r).expect("report serializes"));
            text.push('\n');
        }
        let log = p.with_extension("jsonl");
        std::fs::write(&log, text).map_err(|e| crate::Error::io(&log, e))?;
    }
    Ok((out.bundle, out.reports))
}

/// Relative drop of the perception term: `1 - mean(last window) / first`.
pub fn prcp_decrease(reports: &[LossReport], window: usize) -> Option<f64> {
    let first = reports.first()?.prcp;
    let tail = &reports[reports.len().saturating_sub(window)..];
    let last = tail.iter().map(|r| r.prcp).sum::<f64>() / tail.len() as f64;
    (first > 0.0).then(|| 1.0 - last / first)
}

/// Score a translation run on the validation images.
pub fn benchmark_eval(
    detector: &Detector<f32>,
    bundle: Option<&GanBundle<f32>>,
    corpora: &Corpora,
    seed: u64,
) -> Result<EvalReport> {
    Ok(evaluate(detector, bundle, &corpora.eval_inputs(), &DomainConfig::default(), seed)?.0)
}
