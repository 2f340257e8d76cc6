use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use retinagan::detector::{train_detector, Detector, DetectorConfig, DetectorTrainConfig, NmsConfig};
use retinagan::eval::{emit_report, evaluate, DomainConfig, EvalInputs};
use retinagan::gan::GanBundle;
use retinagan::image_io::load_png;
use retinagan::scene::{corpus_seeds, generate_dataset, load_dataset, LabeledImage, SceneConfig, Style};
use retinagan::tensor::Tensor;
use retinagan::train::{
    load_bundle, load_detector, save_detector, train_ensemble, train_retinagan, translate_dataset, Direction,
    RunDir, TrainConfig,
};

#[derive(Parser)]
#[command(name = "retinagan", version, about = "Sim-to-real translation with detection consistency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labeled synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// sim, real, or paired (both styles of every scene).
        #[arg(long, default_value = "sim")]
        style: String,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train the detector on one or more datasets.
    TrainDetector {
        /// Comma-separated dataset directories.
        #[arg(long, value_delimiter = ',', required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Run the detector on one PNG and write `{boxes, scores, classes}`.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output JSON path; `-` prints to stdout.
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
    /// Train one pair of translation generators.
    TrainGan(GanArgs),
    /// Train several generator pairs with different seeds and weights.
    Ensemble {
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[command(flatten)]
        gan: GanArgs,
    },
    /// Translate a dataset with one or more generator checkpoints.
    Translate {
        /// Comma-separated generator checkpoints, one output copy each.
        #[arg(long, value_delimiter = ',', required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "sim2real")]
        direction: String,
    },
    /// Score a generator: consistency, label preservation and realism.
    /// Exits with status 2 when the realism classifier is unreliable.
    Eval {
        #[arg(long)]
        detector: PathBuf,
        /// Generator checkpoint; omit to score the untranslated images.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Unpaired sim and real images for the realism classifier.
        #[arg(long)]
        data: PathBuf,
        /// Paired held-out set; its sim images are translated and scored.
        #[arg(long)]
        paired: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct GanArgs {
    #[arg(long)]
    sim: PathBuf,
    #[arg(long)]
    real: PathBuf,
    /// Frozen detector checkpoint; needed unless --lambda-prcp is 0.
    #[arg(long)]
    detector: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a generator checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_prcp: Option<f64>,
    #[arg(long)]
    lambda_cycle: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl GanArgs {
    fn config(&self, image_size: usize) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        cfg.steps = self.steps.unwrap_or(cfg.steps);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.lambda_prcp = self.lambda_prcp.unwrap_or(cfg.lambda_prcp);
        cfg.lambda_cycle = self.lambda_cycle.unwrap_or(cfg.lambda_cycle);
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        if cfg.image_size != image_size {
            cfg.crop_size = cfg.crop_size * image_size / cfg.image_size;
            cfg.image_size = image_size;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn detector(&self) -> Result<Option<Detector<f32>>> {
        self.detector
            .as_deref()
            .map(|p| load_detector(p).with_context(|| format!("loading detector {}", p.display())))
            .transpose()
    }
}

fn domain_pixels(dir: &Path, style: Style) -> Result<Vec<Tensor<f32>>> {
    let images: Vec<Tensor<f32>> = load_dataset(dir)
        .with_context(|| format!("loading dataset {}", dir.display()))?
        .into_iter()
        .filter(|i| i.domain == style)
        .map(|i| i.pixels)
        .collect();
    if images.is_empty() {
        bail!("{} holds no {style} images", dir.display());
    }
    Ok(images)
}

fn image_size(images: &[Tensor<f32>]) -> usize {
    images[0].shape()[1]
}

fn gen_data(out: &Path, num: usize, seed: u64, style: &str, size: usize) -> Result<()> {
    let config = SceneConfig {
        image_size: size,
        ..Default::default()
    };
    let (seeds, styles) = match style {
        "paired" => (corpus_seeds(Style::Sim, seed, num), vec![Style::Sim, Style::Real]),
        s => {
            let style: Style = s.parse()?;
            (corpus_seeds(style, seed, num), vec![style])
        }
    };
    let manifest = generate_dataset(out, &seeds, &styles, &config)?;
    eprintln!("wrote {} images to {}", seeds.len() * styles.len(), manifest.display());
    Ok(())
}

fn train_detector_cmd(data: &[PathBuf], out: &Path, steps: usize, seed: u64, batch_size: usize) -> Result<()> {
    let mut images: Vec<LabeledImage> = Vec::new();
    for dir in data {
        images.extend(load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?);
    }
    if images.is_empty() {
        bail!("no training images");
    }
    let config = DetectorConfig {
        image_size: images[0].pixels.shape()[1],
        ..Default::default()
    };
    let mut detector = Detector::new(config, seed)?;
    let cfg = DetectorTrainConfig {
        steps,
        seed,
        batch_size,
        ..Default::default()
    };
    train_detector(&mut detector, &images, &cfg, |step, loss| {
        if step % 100 == 0 || step + 1 == steps {
            eprintln!("step {step} loss {loss:.5}");
        }
    })?;
    save_detector(out, &detector)?;
    eprintln!("saved {}", out.display());
    Ok(())
}

fn detect(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let detector = load_detector(ckpt)?;
    let pixels = load_png(image)?;
    let s = pixels.shape();
    let batch = pixels.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let dets = detector.detect(&batch, &NmsConfig::default())?;
    let json = serde_json::to_string_pretty(&dets[0])?;
    if out == Path::new("-") {
        println!("{json}");
    } else {
        std::fs::write(out, json).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn train_gan(args: &GanArgs) -> Result<()> {
    let sim = domain_pixels(&args.sim, Style::Sim)?;
    let real = domain_pixels(&args.real, Style::Real)?;
    let config = args.config(image_size(&sim))?;
    let detector = args.detector()?;
    let resume = match &args.resume {
        Some(p) => Some(load_bundle(p)?.0),
        None => None,
    };
    let dir = RunDir::new(&args.out)?;
    config.save(&dir.dir.join("config.txt"))?;
    let out = train_retinagan(&config, &sim, &real, detector.as_ref(), resume, Some(&dir), |r| {
        if r.step % 100 == 0 {
            eprintln!(
                "step {} G {:.4} D {:.4} cycle {:.4} prcp {:.4}",
                r.step, r.total_g, r.total_d, r.cycle, r.prcp
            );
        }
    })?;
    eprintln!("saved {} after {} steps", dir.last().display(), out.bundle.step);
    Ok(())
}

fn ensemble(n: usize, args: &GanArgs) -> Result<()> {
    let sim = domain_pixels(&args.sim, Style::Sim)?;
    let real = domain_pixels(&args.real, Style::Real)?;
    let config = args.config(image_size(&sim))?;
    let Some(detector) = args.detector()? else {
        bail!("ensemble training needs --detector");
    };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let runs = train_ensemble(&config, n, &sim, &real, &detector, Some(&args.out), |i, r| {
        if r.step % 100 == 0 {
            eprintln!("member {i} step {} G {:.4} D {:.4}", r.step, r.total_g, r.total_d);
        }
    })?;
    eprintln!("trained {} members under {}", runs.len(), args.out.display());
    Ok(())
}

fn translate(ckpts: &[PathBuf], data: &Path, out: &Path, direction: &str) -> Result<()> {
    let direction: Direction = direction.parse()?;
    let bundles = ckpts
        .iter()
        .map(|p| Ok((p.display().to_string(), load_bundle(p)?.0)))
        .collect::<Result<Vec<(String, GanBundle<f32>)>>>()?;
    let members: Vec<(String, &GanBundle<f32>)> = bundles.iter().map(|(l, b)| (l.clone(), b)).collect();
    let images = load_dataset(data)?;
    let (manifest, t) = translate_dataset(&members, &images, out, direction)?;
    for (k, psnr) in t.psnr.iter().enumerate() {
        eprintln!("member {k}: mean PSNR {psnr:.2} dB");
    }
    eprintln!("wrote {} images to {}", t.images.len(), manifest.display());
    Ok(())
}

fn eval(
    detector: &Path,
    ckpt: Option<&Path>,
    data: &Path,
    paired: &Path,
    out: &Path,
    seed: u64,
) -> Result<ExitCode> {
    let detector = load_detector(detector)?;
    let bundle = ckpt.map(|p| load_bundle(p).map(|b| b.0)).transpose()?;
    let source: Vec<LabeledImage> = load_dataset(paired)?.into_iter().filter(|i| i.domain == Style::Sim).collect();
    if source.is_empty() {
        bail!("{} holds no sim images", paired.display());
    }
    let domain_sim = domain_pixels(data, Style::Sim)?;
    let domain_real = domain_pixels(data, Style::Real)?;
    let inputs = EvalInputs {
        source: &source,
        domain_sim: &domain_sim,
        domain_real: &domain_real,
    };
    let (report, translated) = evaluate(&detector, bundle.as_ref(), &inputs, &DomainConfig::default(), seed)?;
    let originals: Vec<Tensor<f32>> = source.iter().map(|i| i.pixels.clone()).collect();
    let dets = detector.detect_all(&translated, 32, &NmsConfig::default())?;
    emit_report(&report, &originals, &translated, &dets, out)?;
    for (name, value) in report.metrics() {
        println!("{name},{value}");
    }
    if !report.domain_valid {
        eprintln!(
            "domain classifier reached only {:.3} validation accuracy; domain_score is unreliable",
            report.domain_val_accuracy
        );
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData {
            out,
            num,
            seed,
            style,
            size,
        } => gen_data(&out, num, seed, &style, size)?,
        Command::TrainDetector {
            data,
            out,
            steps,
            seed,
            batch_size,
        } => train_detector_cmd(&data, &out, steps, seed, batch_size)?,
        Command::Detect { ckpt, image, out } => detect(&ckpt, &image, &out)?,
        Command::TrainGan(args) => train_gan(&args)?,
        Command::Ensemble { n, gan } => ensemble(n, &gan)?,
        Command::Translate {
            ckpt,
            data,
            out,
            direction,
        } => translate(&ckpt, &data, &out, &direction)?,
        Command::Eval {
            detector,
            ckpt,
            data,
            paired,
            out,
            seed,
        } => return eval(&detector, ckpt.as_deref(), &data, &paired, &out, seed),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
