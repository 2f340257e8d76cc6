//! Layer initialization and small building blocks shared by the networks.

use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{BoundParams, Graph, ParamStore, Real, Tensor, Var};

pub(crate) const LEAKY_SLOPE: f64 = 0.2;

/// He-normal conv weight `[cout, cin, k, k]` scaled by `gain`.
pub(crate) fn conv_weight<T: Real>(rng: &mut Rng, cout: usize, cin: usize, k: usize, gain: f64) -> Tensor<T> {
    let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
    normal(rng, &[cout, cin, k, k], std)
}

pub(crate) fn normal<T: Real>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

/// Adds `<name>.w` and `<name>.b` for a `k x k` conv.
pub(crate) fn add_conv<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, cin: usize, cout: usize, k: usize) {
    store.insert(format!("{name}.w"), conv_weight(rng, cout, cin, k, 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

/// Conv with the bound `<name>.w` / `<name>.b` pair.
pub(crate) fn conv<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    g.conv2d(x, w, Some(b), stride, pad)
}
