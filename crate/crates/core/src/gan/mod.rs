//! Translation generators, patch discriminators and the combined objective.
//!
//! Parameters for both generators live in one [`ParamStore`] under the
//! prefixes `g.` (sim to real) and `f.` (real to sim); the discriminators
//! share another under `dx.` and `dy.`. Each store has its own Adam state.

mod objective;

pub use objective::{
    adversarial_losses, cycle_loss, discriminator_objective, generator_objective, retinagan_total, train_step,
    translate_all, Batch, LossReport, Objective, Translators,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, LEAKY_SLOPE};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{AdamConfig, BoundParams, Graph, OptimState, ParamStore, Real, SpectralState, Tensor, Var};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Prefix of the sim-to-real generator `G`.
pub const G: &str = "g";
/// Prefix of the real-to-sim generator `F`.
pub const F: &str = "f";
/// Prefix of the discriminator on the sim domain.
pub const DX: &str = "dx";
/// Prefix of the discriminator on the real domain.
pub const DY: &str = "dy";

const DISC_LAYERS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub image_size: usize,
    /// Channels at full resolution; the encoder doubles once, then twice.
    pub generator_base: usize,
    /// Channels of the first discriminator layer, doubled per layer.
    pub discriminator_base: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            image_size: 64,
            generator_base: 16,
            discriminator_base: 16,
        }
    }
}

impl GanConfig {
    fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be a positive multiple of 16",
                self.image_size
            )));
        }
        if self.generator_base == 0 || self.discriminator_base == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        Ok(())
    }

    fn generator_layers(&self) -> [(&'static str, usize, usize, usize); 8] {
        let b = self.generator_base;
        // (name, in, out, kernel)
        [
            ("enc0", 3, b, 3),
            ("enc1", b, 2 * b, 3),
            ("enc2", 2 * b, 4 * b, 3),
            ("enc3", 4 * b, 4 * b, 3),
            ("dec2", 8 * b, 2 * b, 3),
            ("dec1", 4 * b, b, 3),
            ("dec0", 2 * b, b, 3),
            ("out", b, 3, 1),
        ]
    }

    fn discriminator_channels(&self) -> [usize; DISC_LAYERS + 1] {
        let b = self.discriminator_base;
        [3, b, 2 * b, 4 * b, 1]
    }
}

/// Add the weights of one U-Net generator under `prefix`. The output conv
/// starts at zero, so a fresh generator emits 0.5 everywhere.
pub fn init_generator<T: Real>(store: &mut ParamStore<T>, config: &GanConfig, prefix: &str, seed: u64) {
    let mut rng = seeded(seed);
    for (name, cin, cout, k) in config.generator_layers() {
        let full = format!("{prefix}.{name}");
        if name == "out" {
            store.insert(format!("{full}.w"), Tensor::zeros(&[cout, cin, k, k]));
            store.insert(format!("{full}.b"), Tensor::zeros(&[cout]));
        } else {
            nn::add_conv(store, &mut rng, &full, cin, cout, k);
        }
    }
}

/// Add one patch discriminator under `prefix` and return its spectral
/// states, one per conv weight in layer order.
pub fn init_discriminator<T: Real>(
    store: &mut ParamStore<T>,
    config: &GanConfig,
    prefix: &str,
    seed: u64,
) -> Vec<SpectralState<T>> {
    let mut rng = seeded(seed);
    let ch = config.discriminator_channels();
    (0..DISC_LAYERS)
        .map(|i| {
            let name = format!("{prefix}.conv{i}");
            nn::add_conv(store, &mut rng, &name, ch[i], ch[i + 1], 3);
            let shape = [ch[i + 1], ch[i], 3, 3];
            SpectralState::new(&shape, derive_seed(seed, &[i as u64]))
        })
        .collect()
}

fn conv_in_act<T: Real>(g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var, stride: usize) -> Result<Var> {
    let h = nn::conv(g, p, name, x, stride, 1)?;
    let h = g.instance_norm(h, INSTANCE_NORM_EPS)?;
    g.leaky_relu(h, LEAKY_SLOPE)
}

/// U-Net with three stride-2 encoder stages, nearest-neighbor upsampling,
/// skip concatenation and a sigmoid output, so values stay in `[0, 1]`.
pub fn generator_forward<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    prefix: &str,
    config: &GanConfig,
    x: Var,
) -> Result<Var> {
    let s = config.image_size;
    let shape = g.shape(x);
    if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
        return Err(Error::Shape(format!("generator expects [N, 3, {s}, {s}] images, got {shape:?}")));
    }
    let h = g.scale(x, 2.0)?;
    let h = g.shift(h, -1.0)?;
    let e0 = conv_in_act(g, p, &format!("{prefix}.enc0"), h, 1)?;
    let e1 = conv_in_act(g, p, &format!("{prefix}.enc1"), e0, 2)?;
    let e2 = conv_in_act(g, p, &format!("{prefix}.enc2"), e1, 2)?;
    let e3 = conv_in_act(g, p, &format!("{prefix}.enc3"), e2, 2)?;
    let mut d = e3;
    for (skip, name) in [(e2, "dec2"), (e1, "dec1"), (e0, "dec0")] {
        let up = g.upsample2x(d)?;
        let cat = g.concat(&[up, skip], 1)?;
        d = conv_in_act(g, p, &format!("{prefix}.{name}"), cat, 1)?;
    }
    let out = nn::conv(g, p, &format!("{prefix}.out"), d, 1, 0)?;
    g.sigmoid(out)
}

/// Patch discriminator: four spectrally normalized stride-2 convs with
/// leaky ReLU between them and no output activation. The score map is
/// `[N, 1, S/16, S/16]`.
pub fn discriminator_forward<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    prefix: &str,
    spectral: &[SpectralState<T>],
    x: Var,
) -> Result<Var> {
    if spectral.len() != DISC_LAYERS {
        return Err(Error::InvalidArgument(format!(
            "discriminator needs {DISC_LAYERS} spectral states, got {}",
            spectral.len()
        )));
    }
    let mut h = g.scale(x, 2.0)?;
    h = g.shift(h, -1.0)?;
    for (i, state) in spectral.iter().enumerate() {
        let w = p.get(&format!("{prefix}.conv{i}.w"))?;
        let b = p.get(&format!("{prefix}.conv{i}.b"))?;
        let w = state.apply(g, w)?;
        h = g.conv2d(h, w, Some(b), 2, 1)?;
        if i + 1 < DISC_LAYERS {
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
        }
    }
    Ok(h)
}

/// Both generators, both discriminators, their optimizer and spectral
/// states, and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct GanBundle<T: Real = f32> {
    pub config: GanConfig,
    pub generators: ParamStore<T>,
    pub discriminators: ParamStore<T>,
    pub spectral_x: Vec<SpectralState<T>>,
    pub spectral_y: Vec<SpectralState<T>>,
    pub opt_generators: OptimState<T>,
    pub opt_discriminators: OptimState<T>,
    pub step: u64,
}

impl<T: Real> GanBundle<T> {
    pub fn new(config: GanConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut generators = ParamStore::new();
        init_generator(&mut generators, &config, G, derive_seed(seed, &[0]));
        init_generator(&mut generators, &config, F, derive_seed(seed, &[1]));
        let mut discriminators = ParamStore::new();
        let spectral_x = init_discriminator(&mut discriminators, &config, DX, derive_seed(seed, &[2]));
        let spectral_y = init_discriminator(&mut discriminators, &config, DY, derive_seed(seed, &[3]));
        let opt_generators = OptimState::new(adam, generators.tensors());
        let opt_discriminators = OptimState::new(adam, discriminators.tensors());
        Ok(GanBundle {
            config,
            generators,
            discriminators,
            spectral_x,
            spectral_y,
            opt_generators,
            opt_discriminators,
            step: 0,
        })
    }

    pub fn spectral(&self, prefix: &str) -> &[SpectralState<T>] {
        if prefix == DX {
            &self.spectral_x
        } else {
            &self.spectral_y
        }
    }

    /// One power iteration on every discriminator weight.
    pub fn power_iterate(&mut self) -> Result<()> {
        for (prefix, states) in [(DX, &mut self.spectral_x), (DY, &mut self.spectral_y)] {
            for (i, state) in states.iter_mut().enumerate() {
                let w = self
                    .discriminators
                    .get(&format!("{prefix}.conv{i}.w"))
                    .ok_or_else(|| Error::InvalidArgument(format!("missing {prefix}.conv{i}.w")))?;
                state.iterate(w, 1)?;
            }
        }
        Ok(())
    }

    /// Translate a batch `[N, 3, S, S]` with generator `prefix`, no gradients.
    pub fn translate(&self, prefix: &str, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.generators.bind(&mut g, false);
        let x = g.constant(images.clone());
        let y = generator_forward(&mut g, &p, prefix, &self.config, x)?;
        Ok(g.value(y).clone())
    }

    pub fn cast<U: Real>(&self) -> GanBundle<U> {
        let cast_states = |s: &[SpectralState<T>]| -> Vec<SpectralState<U>> {
            s.iter()
                .map(|st| SpectralState {
                    u: st.u.iter().map(|v| U::of(v.f64())).collect(),
                    v: st.v.iter().map(|v| U::of(v.f64())).collect(),
                    iterations: st.iterations,
                })
                .collect()
        };
        let cast_opt = |o: &OptimState<T>| OptimState {
            config: o.config,
            step: o.step,
            m: o.m.iter().map(Tensor::cast).collect(),
            v: o.v.iter().map(Tensor::cast).collect(),
        };
        GanBundle {
            config: self.config.clone(),
            generators: self.generators.cast(),
            discriminators: self.discriminators.cast(),
            spectral_x: cast_states(&self.spectral_x),
            spectral_y: cast_states(&self.spectral_y),
            opt_generators: cast_opt(&self.opt_generators),
            opt_discriminators: cast_opt(&self.opt_discriminators),
            step: self.step,
        }
    }
}
