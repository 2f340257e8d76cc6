//! Binary sim-vs-real classifier used as a realism probe.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::fcl_elementwise;
use crate::nn::{self, LEAKY_SLOPE};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{adam_step, AdamConfig, Graph, OptimState, ParamStore, Tensor, Var};

/// Images at or above this probability count as "real".
pub const DECISION_THRESHOLD: f64 = 0.5;
/// Below this held-out accuracy the classifier's scores are flagged.
pub const MIN_VAL_ACCURACY: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub channels: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Share of each domain held out for the accuracy check.
    pub val_fraction: f64,
    pub flip: bool,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            channels: vec![16, 32, 64, 64],
            steps: 300,
            batch_size: 16,
            lr: 1e-3,
            val_fraction: 0.25,
            flip: true,
        }
    }
}

/// Strided conv stack, global average pool, one logit.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainClassifier {
    pub config: DomainConfig,
    pub params: ParamStore<f32>,
    /// Accuracy on the held-out split after training.
    pub val_accuracy: f64,
}

impl DomainClassifier {
    pub fn new(config: DomainConfig, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut params = ParamStore::new();
        let mut cin = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            nn::add_conv(&mut params, &mut rng, &format!("conv.{i}"), cin, c, 3);
            cin = c;
        }
        params.insert("linear.w", nn::normal(&mut rng, &[cin, 1], (1.0 / cin as f64).sqrt()));
        params.insert("linear.b", Tensor::zeros(&[1]));
        DomainClassifier {
            config,
            params,
            val_accuracy: 0.0,
        }
    }

    /// Logits `[N, 1]` for images `[N, 3, H, W]`.
    fn forward(&self, g: &mut Graph<f32>, p: &crate::tensor::BoundParams, x: Var) -> Result<Var> {
        let mut h = g.shift(x, -0.5)?;
        for i in 0..self.config.channels.len() {
            h = nn::conv(g, p, &format!("conv.{i}"), h, 2, 1)?;
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let pooled = g.mean_axes(h, &[2, 3])?;
        let c = *self.config.channels.last().expect("at least one conv");
        let n = g.shape(pooled)[0];
        let pooled = g.reshape(pooled, &[n, c])?;
        let w = p.get("linear.w")?;
        let b = p.get("linear.b")?;
        let z = g.matmul(pooled, w)?;
        let b = g.reshape(b, &[1, 1])?;
        g.add(z, b)
    }

    /// Probability of "real" for each image.
    pub fn predict(&self, images: &[Tensor<f32>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let x = g.constant(Tensor::stack(chunk)?);
            let z = self.forward(&mut g, &p, x)?;
            let s = g.sigmoid(z)?;
            out.extend(g.value(s).data().iter().map(|&v| v as f64));
        }
        Ok(out)
    }

    /// Fraction of `images` classified as real.
    pub fn score(&self, images: &[Tensor<f32>]) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("domain score of an empty set".into()));
        }
        let probs = self.predict(images)?;
        Ok(probs.iter().filter(|&&p| p >= DECISION_THRESHOLD).count() as f64 / probs.len() as f64)
    }

    pub fn is_valid(&self) -> bool {
        self.val_accuracy >= MIN_VAL_ACCURACY
    }
}

fn split<'a>(images: &'a [Tensor<f32>], val_fraction: f64) -> (&'a [Tensor<f32>], &'a [Tensor<f32>]) {
    let n_val = ((images.len() as f64 * val_fraction).round() as usize).clamp(1, images.len() - 1);
    let (train, val) = images.split_at(images.len() - n_val);
    (train, val)
}

fn flip(img: &Tensor<f32>) -> Tensor<f32> {
    let s = img.shape();
    let w = s[2];
    let d = img.data();
    Tensor::from_fn(s, |i| {
        let (row, col) = (i / w, i % w);
        d[row * w + (w - 1 - col)]
    })
}

/// Train a classifier on `sim` (label 0) and `real` (label 1). The last
/// `val_fraction` of each list is held out and sets `val_accuracy`.
pub fn train_domain_classifier(
    sim: &[Tensor<f32>],
    real: &[Tensor<f32>],
    config: &DomainConfig,
    seed: u64,
) -> Result<DomainClassifier> {
    if sim.len() < 2 || real.len() < 2 {
        return Err(Error::InvalidArgument(
            "domain classifier needs at least two images per domain".into(),
        ));
    }
    if !(config.val_fraction > 0.0 && config.val_fraction < 1.0) || config.batch_size == 0 {
        return Err(Error::InvalidArgument("val_fraction must be in (0, 1) and batch_size positive".into()));
    }
    let (sim_train, sim_val) = split(sim, config.val_fraction);
    let (real_train, real_val) = split(real, config.val_fraction);
    let mut clf = DomainClassifier::new(config.clone(), derive_seed(seed, &[0]));
    let adam = AdamConfig {
        lr: config.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut state = OptimState::new(adam, clf.params.tensors());
    for step in 0..config.steps {
        let mut rng = seeded(derive_seed(seed, &[1, step as u64]));
        let mut batch = Vec::with_capacity(config.batch_size);
        let mut labels = Vec::with_capacity(config.batch_size);
        for i in 0..config.batch_size {
            let (pool, label) = if i % 2 == 0 { (sim_train, 0.0) } else { (real_train, 1.0) };
            let img = &pool[rng.random_range(0..pool.len())];
            batch.push(if config.flip && rng.random_bool(0.5) { flip(img) } else { img.clone() });
            labels.push(label);
        }
        let mut g = Graph::new();
        let p = clf.params.bind(&mut g, true);
        let x = g.constant(Tensor::stack(&batch)?);
        let y = g.constant(Tensor::new(&[config.batch_size, 1], labels)?);
        let z = clf.forward(&mut g, &p, x)?;
        let prob = g.sigmoid(z)?;
        let loss = fcl_elementwise(&mut g, y, prob, 0.0, 0.5)?;
        let loss = g.mean(loss)?;
        if !g.value(loss).item()?.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step as u64,
                term: "domain",
            });
        }
        let mut grads = g.backward(loss)?;
        let grads = p.gradients(&g, &mut grads);
        adam_step(clf.params.tensors_mut(), &grads, &mut state)?;
    }
    let sim_probs = clf.predict(sim_val)?;
    let real_probs = clf.predict(real_val)?;
    let correct = sim_probs.iter().filter(|&&p| p < DECISION_THRESHOLD).count()
        + real_probs.iter().filter(|&&p| p >= DECISION_THRESHOLD).count();
    clf.val_accuracy = correct as f64 / (sim_probs.len() + real_probs.len()) as f64;
    Ok(clf)
}
