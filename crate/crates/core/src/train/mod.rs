//! The translation training loop, ensembles, dataset translation and
//! checkpoint conversion for detectors and GAN bundles.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::TrainConfig;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::detector::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::gan::{train_step, Batch, GanBundle, GanConfig, LossReport, F, G};
use crate::rng::{derive_seed, seeded, Rng};
use crate::scene::{export_records, photometric_distort, LabeledImage, ManifestRecord, PhotometricStrengths, Style};
use crate::tensor::{OptimState, ParamStore, SpectralState, Tensor};

/// λ_prcp of ensemble member `i` is `ENSEMBLE_LAMBDAS[i % 3]`.
pub const ENSEMBLE_LAMBDAS: [f64; 3] = [0.1, 0.3, 1.0];

/// Bilinear resize of a `[3, H, W]` image (half-pixel centers).
pub fn resize_bilinear(img: &Tensor<f32>, out: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = img.data();
    let mut data = Vec::with_capacity(c * out * out);
    let sy = h as f64 / out as f64;
    let sx = w as f64 / out as f64;
    for ch in 0..c {
        for i in 0..out {
            let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(h - 1);
            for j in 0..out {
                let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(w - 1);
                let at = |y: usize, x: usize| d[ch * h * w + y * w + x] as f64;
                let v = at(y0, x0) * (1.0 - ty) * (1.0 - tx)
                    + at(y0, x1) * (1.0 - ty) * tx
                    + at(y1, x0) * ty * (1.0 - tx)
                    + at(y1, x1) * ty * tx;
                data.push(v as f32);
            }
        }
    }
    Tensor::new(&[c, out, out], data)
}

/// Random `crop x crop` window resized back to full size, then photometric
/// distortion.
pub fn augment(img: &Tensor<f32>, crop: usize, strengths: &PhotometricStrengths, rng: &mut Rng) -> Result<Tensor<f32>> {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let mut out = img.clone();
    if crop < h || crop < w {
        let top = rng.random_range(0..=h - crop);
        let left = rng.random_range(0..=w - crop);
        let d = img.data();
        let mut window = Vec::with_capacity(3 * crop * crop);
        for c in 0..3 {
            for i in 0..crop {
                let row = c * h * w + (top + i) * w + left;
                window.extend_from_slice(&d[row..row + crop]);
            }
        }
        out = resize_bilinear(&Tensor::new(&[3, crop, crop], window)?, h)?;
    }
    let seed = rng.random();
    if strengths.is_zero() {
        Ok(out)
    } else {
        photometric_distort(&out, seed, strengths)
    }
}

/// Minibatch for `step`: indices and augmentation both derive from
/// `(seed, step)` alone.
pub fn sample_batch(config: &TrainConfig, sim: &[Tensor<f32>], real: &[Tensor<f32>], step: u64) -> Result<Batch<f32>> {
    let mut rng = seeded(derive_seed(config.seed, &[0x6261_7463, step]));
    let strengths = config.distortion();
    let pick = |pool: &[Tensor<f32>], rng: &mut Rng| -> Result<Tensor<f32>> {
        let items = (0..config.batch_size)
            .map(|_| {
                let img = &pool[rng.random_range(0..pool.len())];
                augment(img, config.crop_size, &strengths, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&items)
    };
    let x = pick(sim, &mut rng)?;
    let y = pick(real, &mut rng)?;
    Ok(Batch { x, y })
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub bundle: GanBundle<f32>,
    pub reports: Vec<LossReport>,
    /// Detector parameter digest before and after the run.
    pub detector_digest: Option<(String, String)>,
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(RunDir { dir })
    }

    pub fn losses(&self) -> PathBuf {
        self.dir.join("losses.jsonl")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step_{step:06}.ckpt"))
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("generator.ckpt")
    }
}

fn check_images(name: &str, images: &[Tensor<f32>], size: usize) -> Result<()> {
    if images.is_empty() {
        return Err(Error::InvalidArgument(format!("{name} set is empty")));
    }
    for (index, img) in images.iter().enumerate() {
        if img.shape() != [3, size, size] {
            return Err(Error::Manifest {
                index,
                message: format!("{name} image has shape {:?}, expected [3, {size}, {size}]", img.shape()),
            });
        }
    }
    Ok(())
}

/// Train (or continue training) a generator pair. With `resume` the bundle
/// continues from its stored step; the trajectory matches an uninterrupted
/// run because every minibatch derives from `(seed, step)`.
///
/// The detector is only read. With `lambda_prcp = 0` it is never evaluated.
pub fn train_retinagan(
    config: &TrainConfig,
    sim: &[Tensor<f32>],
    real: &[Tensor<f32>],
    detector: Option<&Detector<f32>>,
    resume: Option<GanBundle<f32>>,
    out: Option<&RunDir>,
    mut on_report: impl FnMut(&LossReport),
) -> Result<RunOutput> {
    config.validate()?;
    check_images("sim", sim, config.image_size)?;
    check_images("real", real, config.image_size)?;
    if config.lambda_prcp != 0.0 && detector.is_none() {
        return Err(Error::InvalidArgument("lambda_prcp > 0 needs a detector".into()));
    }
    if let Some(d) = detector {
        if d.config.image_size != config.image_size {
            return Err(Error::InvalidArgument(format!(
                "detector expects {} px images, run uses {}",
                d.config.image_size, config.image_size
            )));
        }
    }
    let mut bundle = match resume {
        Some(b) => b,
        None => GanBundle::new(config.gan_config(), config.adam(), config.seed)?,
    };
    let params = config.loss_params();
    let digest_before = detector.map(|d| d.params.digest());

    let mut log = match out {
        Some(dir) => {
            let path = dir.losses();
            let file = fs::OpenOptions::new()
                .create(true)
                .append(bundle.step > 0)
                .write(true)
                .truncate(bundle.step == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, std::io::BufWriter::new(file)))
        }
        None => None,
    };
    let mut reports = Vec::with_capacity(config.steps.saturating_sub(bundle.step as usize));
    while (bundle.step as usize) < config.steps {
        let batch = sample_batch(config, sim, real, bundle.step)?;
        let det = if params.lambda_prcp != 0.0 { detector } else { None };
        let report = train_step(&mut bundle, det, &batch, &params)?;
        if let Some((path, w)) = log.as_mut() {
            let line = serde_json::to_string(&report).expect("report serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        on_report(&report);
        reports.push(report);
        if let Some(dir) = out {
            let every = config.checkpoint_every as u64;
            if every > 0 && bundle.step % every == 0 {
                bundle_to_checkpoint(&bundle, Some(config)).save(&dir.checkpoint(bundle.step))?;
            }
        }
    }
    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out {
        bundle_to_checkpoint(&bundle, Some(config)).save(&dir.last())?;
    }
    let detector_digest = match (digest_before, detector) {
        (Some(before), Some(d)) => {
            let after = d.params.digest();
            if before != after {
                return Err(Error::InvalidArgument("detector parameters changed during training".into()));
            }
            Some((before, after))
        }
        _ => None,
    };
    Ok(RunOutput {
        bundle,
        reports,
        detector_digest,
    })
}

/// Configs of the ensemble members: seeds `s, s+1, ...`, perception weights
/// cycling through [`ENSEMBLE_LAMBDAS`].
pub fn ensemble_configs(config: &TrainConfig, n: usize) -> Vec<TrainConfig> {
    (0..n)
        .map(|i| TrainConfig {
            seed: config.seed.wrapping_add(i as u64),
            lambda_prcp: ENSEMBLE_LAMBDAS[i % ENSEMBLE_LAMBDAS.len()],
            ..config.clone()
        })
        .collect()
}

/// Train `n` independent members. Member `i` writes into `out/member_i`.
pub fn train_ensemble(
    config: &TrainConfig,
    n: usize,
    sim: &[Tensor<f32>],
    real: &[Tensor<f32>],
    detector: &Detector<f32>,
    out: Option<&Path>,
    mut on_report: impl FnMut(usize, &LossReport),
) -> Result<Vec<RunOutput>> {
    if n == 0 {
        return Err(Error::InvalidArgument("an ensemble needs at least one member".into()));
    }
    ensemble_configs(config, n)
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let dir = out.map(|d| RunDir::new(d.join(format!("member_{i}")))).transpose()?;
            train_retinagan(cfg, sim, real, Some(detector), None, dir.as_ref(), |r| on_report(i, r))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Sim2Real,
    Real2Sim,
}

impl Direction {
    pub fn source(self) -> Style {
        match self {
            Direction::Sim2Real => Style::Sim,
            Direction::Real2Sim => Style::Real,
        }
    }

    pub fn target(self) -> Style {
        match self {
            Direction::Sim2Real => Style::Real,
            Direction::Real2Sim => Style::Sim,
        }
    }

    pub fn generator(self) -> &'static str {
        match self {
            Direction::Sim2Real => G,
            Direction::Real2Sim => F,
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim2real" => Ok(Direction::Sim2Real),
            "real2sim" => Ok(Direction::Real2Sim),
            other => Err(Error::InvalidArgument(format!(
                "unknown direction `{other}` (expected sim2real or real2sim)"
            ))),
        }
    }
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`; infinite for
/// identical inputs.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.numel().max(1) as f64;
    -10.0 * mse.log10()
}

/// Translate every source-domain image with each generator. Labels are
/// copied unchanged; member `k`'s copies are named `<seed>_<target>_m<k>`.
#[derive(Clone, Debug)]
pub struct Translation {
    pub images: Vec<LabeledImage>,
    pub records: Vec<ManifestRecord>,
    /// Mean PSNR between input and output, per member.
    pub psnr: Vec<f64>,
}

pub fn translate_images(
    members: &[(String, &GanBundle<f32>)],
    images: &[LabeledImage],
    direction: Direction,
    batch: usize,
) -> Result<Translation> {
    let source: Vec<&LabeledImage> = images.iter().filter(|i| i.domain == direction.source()).collect();
    let mut out_images = Vec::with_capacity(source.len() * members.len());
    let mut records = Vec::with_capacity(source.len() * members.len());
    let mut psnrs = Vec::with_capacity(members.len());
    for (k, (label, bundle)) in members.iter().enumerate() {
        let size = bundle.config.image_size;
        if let Some((index, img)) = source.iter().enumerate().find(|(_, i)| i.pixels.shape() != [3, size, size]) {
            return Err(Error::Manifest {
                index,
                message: format!("image shape {:?} does not match generator size {size}", img.pixels.shape()),
            });
        }
        let mut total_psnr = 0.0;
        for chunk in source.chunks(batch.max(1)) {
            let stacked = Tensor::stack(&chunk.iter().map(|i| i.pixels.clone()).collect::<Vec<_>>())?;
            let translated = bundle.translate(direction.generator(), &stacked)?;
            for (n, src) in chunk.iter().enumerate() {
                let pixels = translated.index_outer(n)?;
                total_psnr += psnr(&src.pixels, &pixels);
                records.push(ManifestRecord {
                    image: format!("images/{}_{}_m{k}.png", src.seed, direction.target()),
                    domain: direction.target(),
                    seed: src.seed,
                    boxes: src.boxes.clone(),
                    classes: src.classes.clone(),
                    provenance: Some(format!("member {k}: {label}")),
                });
                out_images.push(LabeledImage {
                    pixels,
                    boxes: src.boxes.clone(),
                    classes: src.classes.clone(),
                    domain: direction.target(),
                    seed: src.seed,
                });
            }
        }
        psnrs.push(total_psnr / source.len().max(1) as f64);
    }
    Ok(Translation {
        images: out_images,
        records,
        psnr: psnrs,
    })
}

/// [`translate_images`] followed by export to `out_dir`.
pub fn translate_dataset(
    members: &[(String, &GanBundle<f32>)],
    images: &[LabeledImage],
    out_dir: &Path,
    direction: Direction,
) -> Result<(PathBuf, Translation)> {
    let t = translate_images(members, images, direction, 32)?;
    let entries: Vec<(ManifestRecord, &Tensor<f32>)> =
        t.records.iter().cloned().zip(t.images.iter().map(|i| &i.pixels)).collect();
    let manifest = export_records(out_dir, &entries)?;
    Ok((manifest, t))
}

// Checkpoint conversion.

fn store_tensors(prefix: &str, store: &ParamStore<f32>, out: &mut Vec<(String, Tensor<f32>)>) {
    for (name, t) in store.iter() {
        out.push((format!("{prefix}/{name}"), t.clone()));
    }
}

fn optim_tensors(prefix: &str, names: &[String], state: &OptimState<f32>, out: &mut Vec<(String, Tensor<f32>)>) {
    for (name, (m, v)) in names.iter().zip(state.m.iter().zip(&state.v)) {
        out.push((format!("{prefix}/m/{name}"), m.clone()));
        out.push((format!("{prefix}/v/{name}"), v.clone()));
    }
}

fn spectral_tensors(prefix: &str, states: &[SpectralState<f32>], out: &mut Vec<(String, Tensor<f32>)>) {
    for (i, s) in states.iter().enumerate() {
        out.push((format!("spectral/{prefix}/{i}/u"), Tensor::new(&[s.u.len()], s.u.clone()).expect("1-d")));
        out.push((format!("spectral/{prefix}/{i}/v"), Tensor::new(&[s.v.len()], s.v.clone()).expect("1-d")));
    }
}

pub fn bundle_to_checkpoint(bundle: &GanBundle<f32>, config: Option<&TrainConfig>) -> Checkpoint {
    let mut tensors = Vec::new();
    store_tensors("gen", &bundle.generators, &mut tensors);
    store_tensors("disc", &bundle.discriminators, &mut tensors);
    optim_tensors("opt_gen", bundle.generators.names(), &bundle.opt_generators, &mut tensors);
    optim_tensors("opt_disc", bundle.discriminators.names(), &bundle.opt_discriminators, &mut tensors);
    spectral_tensors("dx", &bundle.spectral_x, &mut tensors);
    spectral_tensors("dy", &bundle.spectral_y, &mut tensors);
    let meta = json!({
        "kind": "gan",
        "gan": bundle.config,
        "step": bundle.step,
        "generator_names": bundle.generators.names(),
        "discriminator_names": bundle.discriminators.names(),
        "opt_gen": {"config": bundle.opt_generators.config, "step": bundle.opt_generators.step},
        "opt_disc": {"config": bundle.opt_discriminators.config, "step": bundle.opt_discriminators.step},
        "spectral_iterations": {
            "dx": bundle.spectral_x.iter().map(|s| s.iterations).collect::<Vec<_>>(),
            "dy": bundle.spectral_y.iter().map(|s| s.iterations).collect::<Vec<_>>(),
        },
        "train_config": config.map(TrainConfig::to_config_string),
    });
    Checkpoint { meta, tensors }
}

fn meta_field<T: for<'de> Deserialize<'de>>(meta: &serde_json::Value, pointer: &str) -> Result<T> {
    let v = meta
        .pointer(pointer)
        .ok_or_else(|| Error::ShapeTable(format!("metadata lacks `{pointer}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::ShapeTable(format!("metadata `{pointer}`: {e}")))
}

fn expect_kind(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    let found: String = meta_field(&ckpt.meta, "/kind")?;
    if found != kind {
        return Err(Error::ShapeTable(format!("expected a {kind} checkpoint, found {found}")));
    }
    Ok(())
}

fn load_store(ckpt: &Checkpoint, prefix: &str, names: &[String], template: &ParamStore<f32>) -> Result<ParamStore<f32>> {
    if names != template.names() {
        return Err(Error::ShapeTable(format!("{prefix} parameter names differ from the architecture")));
    }
    let mut store = ParamStore::new();
    for (name, expected) in template.iter() {
        let t = ckpt.get(&format!("{prefix}/{name}"))?;
        if t.shape() != expected.shape() {
            return Err(Error::ShapeTable(format!(
                "`{prefix}/{name}` has shape {:?}, expected {:?}",
                t.shape(),
                expected.shape()
            )));
        }
        store.insert(name, t.clone());
    }
    Ok(store)
}

fn load_optim(ckpt: &Checkpoint, prefix: &str, store: &ParamStore<f32>) -> Result<OptimState<f32>> {
    let config = meta_field(&ckpt.meta, &format!("/{prefix}/config"))?;
    let step = meta_field(&ckpt.meta, &format!("/{prefix}/step"))?;
    let mut m = Vec::with_capacity(store.len());
    let mut v = Vec::with_capacity(store.len());
    for (name, p) in store.iter() {
        for (buf, kind) in [(&mut m, "m"), (&mut v, "v")] {
            let t = ckpt.get(&format!("{prefix}/{kind}/{name}"))?;
            if t.shape() != p.shape() {
                return Err(Error::ShapeTable(format!("`{prefix}/{kind}/{name}` shape mismatch")));
            }
            buf.push(t.clone());
        }
    }
    Ok(OptimState { config, step, m, v })
}

fn load_spectral(ckpt: &Checkpoint, prefix: &str, template: &[SpectralState<f32>]) -> Result<Vec<SpectralState<f32>>> {
    let iterations: Vec<u64> = meta_field(&ckpt.meta, &format!("/spectral_iterations/{prefix}"))?;
    if iterations.len() != template.len() {
        return Err(Error::ShapeTable(format!("{prefix} spectral state count mismatch")));
    }
    template
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let u = ckpt.get(&format!("spectral/{prefix}/{i}/u"))?;
            let v = ckpt.get(&format!("spectral/{prefix}/{i}/v"))?;
            if u.numel() != t.u.len() || v.numel() != t.v.len() {
                return Err(Error::ShapeTable(format!("spectral/{prefix}/{i} shape mismatch")));
            }
            Ok(SpectralState {
                u: u.data().to_vec(),
                v: v.data().to_vec(),
                iterations: iterations[i],
            })
        })
        .collect()
}

/// Rebuild a bundle (and the training config it was saved with, if any).
pub fn bundle_from_checkpoint(ckpt: &Checkpoint) -> Result<(GanBundle<f32>, Option<TrainConfig>)> {
    expect_kind(ckpt, "gan")?;
    let config: GanConfig = meta_field(&ckpt.meta, "/gan")?;
    let template = GanBundle::<f32>::new(config.clone(), Default::default(), 0)?;
    let gen_names: Vec<String> = meta_field(&ckpt.meta, "/generator_names")?;
    let disc_names: Vec<String> = meta_field(&ckpt.meta, "/discriminator_names")?;
    let generators = load_store(ckpt, "gen", &gen_names, &template.generators)?;
    let discriminators = load_store(ckpt, "disc", &disc_names, &template.discriminators)?;
    let opt_generators = load_optim(ckpt, "opt_gen", &generators)?;
    let opt_discriminators = load_optim(ckpt, "opt_disc", &discriminators)?;
    let spectral_x = load_spectral(ckpt, "dx", &template.spectral_x)?;
    let spectral_y = load_spectral(ckpt, "dy", &template.spectral_y)?;
    let step = meta_field(&ckpt.meta, "/step")?;
    let train_text: Option<String> = meta_field(&ckpt.meta, "/train_config")?;
    let train = train_text.map(|t| TrainConfig::from_config_str(&t)).transpose()?;
    let expected = 2 * (generators.len() + discriminators.len())
        + generators.len()
        + discriminators.len()
        + 2 * (spectral_x.len() + spectral_y.len());
    if ckpt.tensors.len() != expected {
        return Err(Error::ShapeTable(format!(
            "{} tensors stored, architecture needs {expected}",
            ckpt.tensors.len()
        )));
    }
    Ok((
        GanBundle {
            config,
            generators,
            discriminators,
            spectral_x,
            spectral_y,
            opt_generators,
            opt_discriminators,
            step,
        },
        train,
    ))
}

pub fn detector_to_checkpoint(detector: &Detector<f32>) -> Checkpoint {
    let mut tensors = Vec::new();
    store_tensors("det", &detector.params, &mut tensors);
    Checkpoint {
        meta: json!({
            "kind": "detector",
            "detector": detector.config,
            "names": detector.params.names(),
        }),
        tensors,
    }
}

pub fn detector_from_checkpoint(ckpt: &Checkpoint) -> Result<Detector<f32>> {
    expect_kind(ckpt, "detector")?;
    let config: DetectorConfig = meta_field(&ckpt.meta, "/detector")?;
    let names: Vec<String> = meta_field(&ckpt.meta, "/names")?;
    let mut det = Detector::<f32>::new(config, 0)?;
    det.params = load_store(ckpt, "det", &names, &det.params)?;
    if ckpt.tensors.len() != det.params.len() {
        return Err(Error::ShapeTable(format!(
            "{} tensors stored, detector has {}",
            ckpt.tensors.len(),
            det.params.len()
        )));
    }
    Ok(det)
}

pub fn save_bundle(path: &Path, bundle: &GanBundle<f32>, config: Option<&TrainConfig>) -> Result<()> {
    bundle_to_checkpoint(bundle, config).save(path)
}

pub fn load_bundle(path: &Path) -> Result<(GanBundle<f32>, Option<TrainConfig>)> {
    bundle_from_checkpoint(&Checkpoint::load(path)?)
}

pub fn save_detector(path: &Path, detector: &Detector<f32>) -> Result<()> {
    detector_to_checkpoint(detector).save(path)
}

pub fn load_detector(path: &Path) -> Result<Detector<f32>> {
    detector_from_checkpoint(&Checkpoint::load(path)?)
}
