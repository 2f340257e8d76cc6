//! Classification and box losses, from plain cross entropy up to the
//! six-pair perception consistency objective.
//!
//! Scalar `f64` versions serve as references and for documentation; the
//! graph versions are what training differentiates through. Both follow the
//! same formulas:
//!
//! ```text
//! CE(y, p)        = -y ln p - (1 - y) ln(1 - p)        p clamped to [1e-7, 1 - 1e-7]
//! BCE(y, p; a)    = [(2a - 1) p + (1 - a)] CE(y, p)
//! FL(y, p; g, a)  = (1 - p_t)^g BCE(y, p; a)           p_t = p if y = 1 else 1 - p
//! FCL(y, p; g, a) = |y - p|^g BCE(y, p; a)
//! ```

use serde::{Deserialize, Serialize};

use crate::detector::HeadOutputs;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Lower bound on every normalizer (probability mass, anchor weights).
pub const NORM_FLOOR: f64 = 1.0;

/// Loss hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub gamma: f64,
    pub alpha: f64,
    pub delta: f64,
    pub lambda_prcp: f64,
    pub lambda_cycle: f64,
    pub lambda_gan: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            gamma: 2.0,
            alpha: 0.25,
            delta: 1.0,
            lambda_prcp: 0.1,
            lambda_cycle: 10.0,
            lambda_gan: 1.0,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        finite_nonneg("gamma", self.gamma)?;
        finite_nonneg("lambda_prcp", self.lambda_prcp)?;
        finite_nonneg("lambda_cycle", self.lambda_cycle)?;
        finite_nonneg("lambda_gan", self.lambda_gan)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta must be > 0, got {}", self.delta)));
        }
        Ok(())
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross entropy of prediction `p` against a (possibly soft) target `y`.
pub fn cross_entropy(y: f64, p: f64) -> f64 {
    let p = clamp_prob(p);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

/// Cross entropy scaled by the weight `(2a - 1) p + (1 - a)`, which moves
/// from `1 - a` at `p = 0` to `a` at `p = 1`.
pub fn balanced_ce(y: f64, p: f64, alpha: f64) -> f64 {
    let p = clamp_prob(p);
    ((2.0 * alpha - 1.0) * p + (1.0 - alpha)) * cross_entropy(y, p)
}

/// Focal loss for a hard target. Rejects `y` outside `{0, 1}`; use [`fcl`]
/// for soft targets.
pub fn focal_loss(y: f64, p: f64, gamma: f64, alpha: f64) -> Result<f64> {
    let p_t = if y == 1.0 {
        clamp_prob(p)
    } else if y == 0.0 {
        1.0 - clamp_prob(p)
    } else {
        return Err(Error::InvalidArgument(format!("focal loss needs a binary target, got {y}")));
    };
    Ok(focus(1.0 - p_t, gamma) * balanced_ce(y, p, alpha))
}

/// Focal consistency loss: the focal factor generalized to soft targets.
pub fn fcl(y: f64, p: f64, gamma: f64, alpha: f64) -> f64 {
    focus((y - clamp_prob(p)).abs(), gamma) * balanced_ce(y, p, alpha)
}

fn focus(d: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        1.0
    } else {
        d.powf(gamma)
    }
}

/// `0.5 d^2 / delta` for `|d| <= delta`, `|d| - delta / 2` beyond.
pub fn huber(d: f64, delta: f64) -> f64 {
    if d.abs() <= delta {
        0.5 * d * d / delta
    } else {
        d.abs() - 0.5 * delta
    }
}

/// Elementwise FCL between targets `y` and probabilities `p` of equal shape.
/// With one-hot `y` this is exactly the focal loss, so detector training and
/// the consistency objective share this function.
pub fn fcl_elementwise<T: Real>(g: &mut Graph<T>, y: Var, p: Var, gamma: f64, alpha: f64) -> Result<Var> {
    if g.shape(y) != g.shape(p) {
        return Err(Error::Shape(format!(
            "fcl target {:?} and prediction {:?} differ",
            g.shape(y),
            g.shape(p)
        )));
    }
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let one_minus_p = g.scale(p, -1.0)?;
    let one_minus_p = g.shift(one_minus_p, 1.0)?;
    let one_minus_y = g.scale(y, -1.0)?;
    let one_minus_y = g.shift(one_minus_y, 1.0)?;

    let log_p = g.log(p)?;
    let log_q = g.log(one_minus_p)?;
    let a = g.mul(y, log_p)?;
    let b = g.mul(one_minus_y, log_q)?;
    let ce = g.add(a, b)?;
    let ce = g.scale(ce, -1.0)?;

    let weight = g.scale(p, 2.0 * alpha - 1.0)?;
    let weight = g.shift(weight, 1.0 - alpha)?;
    let bce = g.mul(weight, ce)?;
    if gamma == 0.0 {
        return Ok(bce);
    }
    let diff = g.sub(y, p)?;
    let diff = g.abs(diff)?;
    let factor = g.pow(diff, gamma)?;
    g.mul(factor, bce)
}

/// Per-image sum of FCL over anchors and classes, divided by the reference
/// probability mass (floored at 1), then averaged over the batch.
///
/// Both inputs are probabilities of shape `[N, anchors, K]`; `cls_ref` acts
/// as the target.
pub fn fcl_class_term<T: Real>(g: &mut Graph<T>, cls_ref: Var, cls_cmp: Var, gamma: f64, alpha: f64) -> Result<Var> {
    if g.shape(cls_ref).len() != 3 {
        return Err(Error::Shape(format!(
            "class probabilities must be [N, anchors, K], got {:?}",
            g.shape(cls_ref)
        )));
    }
    let per = fcl_elementwise(g, cls_ref, cls_cmp, gamma, alpha)?;
    let num = g.sum_axes(per, &[1, 2])?;
    let mass = g.sum_axes(cls_ref, &[1, 2])?;
    let den = g.clamp(mass, NORM_FLOOR, f64::INFINITY)?;
    let ratio = g.div(num, den)?;
    g.mean(ratio)
}

/// Weighted Huber distance between box regressions `[N, anchors, 4]`:
/// per image `sum_a w_a sum_c huber(d) / max(sum_a w_a, 1)`, averaged over
/// the batch. `weights` has shape `[N, anchors]`.
pub fn huber_box<T: Real>(g: &mut Graph<T>, box_ref: Var, box_cmp: Var, weights: Var, delta: f64) -> Result<Var> {
    let shape = g.shape(box_ref).to_vec();
    if shape.len() != 3 || shape[2] != 4 || g.shape(box_cmp) != shape.as_slice() {
        return Err(Error::Shape(format!(
            "box regressions must both be [N, anchors, 4], got {:?} and {:?}",
            shape,
            g.shape(box_cmp)
        )));
    }
    if g.shape(weights) != &shape[..2] {
        return Err(Error::Shape(format!(
            "anchor weights {:?} do not match boxes {:?}",
            g.shape(weights),
            shape
        )));
    }
    let d = g.sub(box_ref, box_cmp)?;
    let h = g.huber(d, delta)?;
    let per_anchor = g.sum_axes(h, &[2])?;
    let weighted = g.mul(per_anchor, weights)?;
    let num = g.sum_axes(weighted, &[1])?;
    let mass = g.sum_axes(weights, &[1])?;
    let den = g.clamp(mass, NORM_FLOOR, f64::INFINITY)?;
    let ratio = g.div(num, den)?;
    g.mean(ratio)
}

/// Perception consistency between detector outputs on a reference image `a`
/// and a comparand `b`, summed over pyramid levels. Box terms are weighted
/// per anchor by the reference's highest class probability. Not symmetric.
pub fn pair_prcp_loss<T: Real>(g: &mut Graph<T>, a: &HeadOutputs, b: &HeadOutputs, params: &LossParams) -> Result<Var> {
    if a.levels.len() != b.levels.len() || a.levels.is_empty() {
        return Err(Error::Shape(format!(
            "pyramid mismatch: {} vs {} levels",
            a.levels.len(),
            b.levels.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (la, lb) in a.levels.iter().zip(&b.levels) {
        if g.shape(la.cls) != g.shape(lb.cls) || g.shape(la.boxes) != g.shape(lb.boxes) {
            return Err(Error::Shape(format!(
                "anchor grid mismatch: {:?} vs {:?}",
                g.shape(la.cls),
                g.shape(lb.cls)
            )));
        }
        let pa = g.sigmoid(la.cls)?;
        let pb = g.sigmoid(lb.cls)?;
        let weights = g.max_axis(pa, 2)?;
        let box_term = huber_box(g, la.boxes, lb.boxes, weights, params.delta)?;
        let cls_term = fcl_class_term(g, pa, pb, params.gamma, params.alpha)?;
        let level = g.add(box_term, cls_term)?;
        total = Some(match total {
            Some(t) => g.add(t, level)?,
            None => level,
        });
    }
    Ok(total.expect("at least one level"))
}

/// Position of each image in the sextet passed to [`full_prcp_loss`].
pub const X: usize = 0;
pub const X_FAKE: usize = 1;
pub const X_CYCLED: usize = 2;
pub const Y: usize = 3;
pub const Y_FAKE: usize = 4;
pub const Y_CYCLED: usize = 5;

/// `(reference, comparand, weight)` for the six consistency pairs. Pairs
/// involving a cycled image count half.
pub const PRCP_PAIRS: [(usize, usize, f64); 6] = [
    (X, X_FAKE, 1.0),
    (X, X_CYCLED, 0.5),
    (X_FAKE, X_CYCLED, 0.5),
    (Y, Y_FAKE, 1.0),
    (Y, Y_CYCLED, 0.5),
    (Y_FAKE, Y_CYCLED, 0.5),
];

/// Consistency over `[x, G(x), F(G(x)), y, F(y), G(F(y))]`, with `detect`
/// producing head outputs for one image batch.
pub fn full_prcp_loss<T: Real>(
    g: &mut Graph<T>,
    images: [Var; 6],
    mut detect: impl FnMut(&mut Graph<T>, Var) -> Result<HeadOutputs>,
    params: &LossParams,
) -> Result<Var> {
    let mut outputs = Vec::with_capacity(6);
    for &img in &images {
        outputs.push(detect(g, img)?);
    }
    weighted_pairs(g, &outputs, params)
}

/// The six-pair sum over precomputed head outputs, in sextet order.
pub fn weighted_pairs<T: Real>(g: &mut Graph<T>, outputs: &[HeadOutputs], params: &LossParams) -> Result<Var> {
    if outputs.len() != 6 {
        return Err(Error::InvalidArgument(format!(
            "expected 6 head outputs, got {}",
            outputs.len()
        )));
    }
    let mut total: Option<Var> = None;
    for &(r, c, w) in &PRCP_PAIRS {
        let term = pair_prcp_loss(g, &outputs[r], &outputs[c], params)?;
        let term = if w == 1.0 { term } else { g.scale(term, w)? };
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("six pairs"))
}
