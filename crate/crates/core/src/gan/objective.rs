//! Least-squares adversarial, cycle and perception terms, and one
//! alternating optimization step.

use serde::{Deserialize, Serialize};

use super::{discriminator_forward, generator_forward, GanBundle, DX, DY, F, G};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::losses::{full_prcp_loss, LossParams};
use crate::tensor::{adam_step, Graph, Real, Tensor, Var};

/// Sim images `x` and real images `y`, each `[N, 3, S, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Real = f32> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
}

/// Loss values of one step. Discriminator terms are measured before the
/// discriminator update, generator terms after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub g_adv_xy: f64,
    pub g_adv_yx: f64,
    pub d_x: f64,
    pub d_y: f64,
    pub cycle: f64,
    pub prcp: f64,
    #[serde(rename = "total_G")]
    pub total_g: f64,
    #[serde(rename = "total_D")]
    pub total_d: f64,
}

/// `(d_loss, g_loss)` = `(0.5 mean((D_real - 1)^2) + 0.5 mean(D_fake^2),
/// mean((D_fake - 1)^2))`.
pub fn adversarial_losses<T: Real>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<(Var, Var)> {
    if g.shape(d_real) != g.shape(d_fake) {
        return Err(Error::Shape(format!(
            "score maps differ: {:?} vs {:?}",
            g.shape(d_real),
            g.shape(d_fake)
        )));
    }
    let r = g.shift(d_real, -1.0)?;
    let r = g.mul(r, r)?;
    let r = g.mean(r)?;
    let f = g.mul(d_fake, d_fake)?;
    let f = g.mean(f)?;
    let d = g.add(r, f)?;
    let d = g.scale(d, 0.5)?;
    let gf = g.shift(d_fake, -1.0)?;
    let gf = g.mul(gf, gf)?;
    let gl = g.mean(gf)?;
    Ok((d, gl))
}

/// `mean|x - x''| + mean|y - y''|`.
pub fn cycle_loss<T: Real>(g: &mut Graph<T>, x: Var, x_cycled: Var, y: Var, y_cycled: Var) -> Result<Var> {
    let a = g.sub(x, x_cycled)?;
    let a = g.abs(a)?;
    let a = g.mean(a)?;
    let b = g.sub(y, y_cycled)?;
    let b = g.abs(b)?;
    let b = g.mean(b)?;
    g.add(a, b)
}

/// The two translation directions as graph functions; `G` maps sim to real.
pub trait Translators<T: Real> {
    fn translate(&mut self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var>;
}

impl<T: Real, Fun: FnMut(&mut Graph<T>, &str, Var) -> Result<Var>> Translators<T> for Fun {
    fn translate(&mut self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        self(g, prefix, x)
    }
}

/// Graph handles of the generator-side objective.
#[derive(Clone, Debug)]
pub struct Objective {
    /// `[x, G(x), F(G(x)), y, F(y), G(F(y))]`.
    pub images: [Var; 6],
    pub g_adv_xy: Var,
    pub g_adv_yx: Var,
    pub cycle: Var,
    /// Absent when the perception weight is zero and the detector is skipped.
    pub prcp: Option<Var>,
    pub total_g: Var,
}

/// The six images of one step.
pub fn translate_all<T: Real>(g: &mut Graph<T>, x: Var, y: Var, gens: &mut impl Translators<T>) -> Result<[Var; 6]> {
    let x_fake = gens.translate(g, G, x)?;
    let x_cycled = gens.translate(g, F, x_fake)?;
    let y_fake = gens.translate(g, F, y)?;
    let y_cycled = gens.translate(g, G, y_fake)?;
    Ok([x, x_fake, x_cycled, y, y_fake, y_cycled])
}

/// Generator losses given the six images and discriminator / detector
/// callbacks. `total = l_gan (adv_xy + adv_yx) + l_cycle cycle + l_prcp prcp`.
pub fn generator_objective<T: Real>(
    g: &mut Graph<T>,
    images: [Var; 6],
    mut discriminate: impl FnMut(&mut Graph<T>, &str, Var) -> Result<Var>,
    detect: Option<&mut dyn FnMut(&mut Graph<T>, Var) -> Result<crate::detector::HeadOutputs>>,
    params: &LossParams,
) -> Result<Objective> {
    let [x, x_fake, x_cycled, y, y_fake, y_cycled] = images;
    let score_xy = discriminate(g, DY, x_fake)?;
    let (_, g_adv_xy) = adversarial_losses(g, score_xy, score_xy)?;
    let score_yx = discriminate(g, DX, y_fake)?;
    let (_, g_adv_yx) = adversarial_losses(g, score_yx, score_yx)?;
    let cycle = cycle_loss(g, x, x_cycled, y, y_cycled)?;

    let adv = g.add(g_adv_xy, g_adv_yx)?;
    let adv = g.scale(adv, params.lambda_gan)?;
    let cyc = g.scale(cycle, params.lambda_cycle)?;
    let mut total = g.add(adv, cyc)?;
    let mut prcp = None;
    if params.lambda_prcp != 0.0 {
        let detect = detect.ok_or_else(|| {
            Error::InvalidArgument("a nonzero perception weight needs a detector".into())
        })?;
        let p = full_prcp_loss(g, images, |g: &mut Graph<T>, v| detect(g, v), params)?;
        let weighted = g.scale(p, params.lambda_prcp)?;
        total = g.add(total, weighted)?;
        prcp = Some(p);
    }
    Ok(Objective {
        images,
        g_adv_xy,
        g_adv_yx,
        cycle,
        prcp,
        total_g: total,
    })
}

/// `(d_x, d_y)`: each discriminator scores its real images against the
/// translations into its domain.
pub fn discriminator_objective<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    y: Var,
    x_fake: Var,
    y_fake: Var,
    mut discriminate: impl FnMut(&mut Graph<T>, &str, Var) -> Result<Var>,
) -> Result<(Var, Var)> {
    let real_y = discriminate(g, DY, y)?;
    let fake_y = discriminate(g, DY, x_fake)?;
    let (d_y, _) = adversarial_losses(g, real_y, fake_y)?;
    let real_x = discriminate(g, DX, x)?;
    let fake_x = discriminate(g, DX, y_fake)?;
    let (d_x, _) = adversarial_losses(g, real_x, fake_x)?;
    Ok((d_x, d_y))
}

fn scalar<T: Real>(g: &Graph<T>, v: Var, step: u64, term: &'static str) -> Result<f64> {
    let value = g.value(v).item()?.f64();
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { step, term })
    }
}

fn check_batch<T: Real>(batch: &Batch<T>) -> Result<()> {
    if batch.x.shape() != batch.y.shape() {
        return Err(Error::Shape(format!(
            "sim batch {:?} and real batch {:?} differ",
            batch.x.shape(),
            batch.y.shape()
        )));
    }
    Ok(())
}

/// Evaluate every term on `batch` with the current parameters, without
/// updating anything.
pub fn retinagan_total<T: Real>(
    batch: &Batch<T>,
    bundle: &GanBundle<T>,
    detector: Option<&Detector<T>>,
    params: &LossParams,
) -> Result<LossReport> {
    check_batch(batch)?;
    let step = bundle.step;
    let mut g = Graph::new();
    let pg = bundle.generators.bind(&mut g, false);
    let pd = bundle.discriminators.bind(&mut g, false);
    let x = g.constant(batch.x.clone());
    let y = g.constant(batch.y.clone());
    let config = bundle.config.clone();
    let images = translate_all(&mut g, x, y, &mut |g: &mut Graph<T>, prefix: &str, v| {
        generator_forward(g, &pg, prefix, &config, v)
    })?;
    let disc = |g: &mut Graph<T>, prefix: &str, v| discriminator_forward(g, &pd, prefix, bundle.spectral(prefix), v);
    let (d_x, d_y) = discriminator_objective(&mut g, x, y, images[1], images[4], disc)?;
    let detector_bound = detector.map(|d| (d, d.params.bind(&mut g, false)));
    let mut detect_fn = detector_bound
        .as_ref()
        .map(|(d, p)| move |g: &mut Graph<T>, v: Var| d.forward(g, p, v));
    let obj = generator_objective(
        &mut g,
        images,
        disc,
        detect_fn.as_mut().map(|f| f as &mut dyn FnMut(&mut Graph<T>, Var) -> Result<_>),
        params,
    )?;
    let d_x_v = scalar(&g, d_x, step, "d_x")?;
    let d_y_v = scalar(&g, d_y, step, "d_y")?;
    report(&g, &obj, step, d_x_v, d_y_v)
}

fn report<T: Real>(g: &Graph<T>, obj: &Objective, step: u64, d_x: f64, d_y: f64) -> Result<LossReport> {
    Ok(LossReport {
        step,
        g_adv_xy: scalar(g, obj.g_adv_xy, step, "g_adv_xy")?,
        g_adv_yx: scalar(g, obj.g_adv_yx, step, "g_adv_yx")?,
        d_x,
        d_y,
        cycle: scalar(g, obj.cycle, step, "cycle")?,
        prcp: match obj.prcp {
            Some(p) => scalar(g, p, step, "prcp")?,
            None => 0.0,
        },
        total_g: scalar(g, obj.total_g, step, "total_G")?,
        total_d: d_x + d_y,
    })
}

/// One alternating update on `batch`: power-iterate and step both
/// discriminators against the current translations, then step both
/// generators against the updated discriminators. The detector, if any, is
/// read only.
pub fn train_step(
    bundle: &mut GanBundle<f32>,
    detector: Option<&Detector<f32>>,
    batch: &Batch<f32>,
    params: &LossParams,
) -> Result<LossReport> {
    check_batch(batch)?;
    let step = bundle.step;
    let config = bundle.config.clone();

    let mut g = Graph::new();
    let pg = bundle.generators.bind(&mut g, true);
    let x = g.constant(batch.x.clone());
    let y = g.constant(batch.y.clone());
    let images = translate_all(&mut g, x, y, &mut |g: &mut Graph<f32>, prefix: &str, v| {
        generator_forward(g, &pg, prefix, &config, v)
    })?;

    // Discriminator step on its own tape, translations held constant.
    bundle.power_iterate()?;
    let (d_x, d_y) = {
        let mut gd = Graph::new();
        let pd = bundle.discriminators.bind(&mut gd, true);
        let xd = gd.constant(batch.x.clone());
        let yd = gd.constant(batch.y.clone());
        let x_fake = gd.constant(g.value(images[1]).clone());
        let y_fake = gd.constant(g.value(images[4]).clone());
        let b: &GanBundle<f32> = bundle;
        let (dx, dy) = discriminator_objective(&mut gd, xd, yd, x_fake, y_fake, |g: &mut Graph<f32>, prefix: &str, v| {
            discriminator_forward(g, &pd, prefix, b.spectral(prefix), v)
        })?;
        let total = gd.add(dx, dy)?;
        let d_x = scalar(&gd, dx, step, "d_x")?;
        let d_y = scalar(&gd, dy, step, "d_y")?;
        let mut grads = gd.backward(total)?;
        let grads = pd.gradients(&gd, &mut grads);
        adam_step(bundle.discriminators.tensors_mut(), &grads, &mut bundle.opt_discriminators)?;
        (d_x, d_y)
    };

    let pd = bundle.discriminators.bind(&mut g, false);
    let b: &GanBundle<f32> = bundle;
    let disc = |g: &mut Graph<f32>, prefix: &str, v| discriminator_forward(g, &pd, prefix, b.spectral(prefix), v);
    let detector_bound = detector.map(|d| (d, d.params.bind(&mut g, false)));
    let mut detect_fn = detector_bound
        .as_ref()
        .map(|(d, p)| move |g: &mut Graph<f32>, v: Var| d.forward(g, p, v));
    let obj = generator_objective(
        &mut g,
        images,
        disc,
        detect_fn.as_mut().map(|f| f as &mut dyn FnMut(&mut Graph<f32>, Var) -> Result<_>),
        params,
    )?;
    let rep = report(&g, &obj, step, d_x, d_y)?;
    let mut grads = g.backward(obj.total_g)?;
    let grads = pg.gradients(&g, &mut grads);
    adam_step(bundle.generators.tensors_mut(), &grads, &mut bundle.opt_generators)?;
    bundle.step += 1;
    Ok(rep)
}
