//! Power-iteration spectral normalization.

use rand::Rng;

use super::kernels::matmul_into;
use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::seeded;

const SIGMA_FLOOR: f64 = 1e-12;

/// Left/right singular vector estimates for one weight, viewed as
/// `[out_features, rest]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState<T: Real = f32> {
    pub u: Vec<T>,
    pub v: Vec<T>,
    pub iterations: u64,
}

fn normalize<T: Real>(x: &mut [T]) -> T {
    let norm = x.iter().map(|&a| a * a).sum::<T>().sqrt();
    if norm.f64() > SIGMA_FLOOR {
        x.iter_mut().for_each(|a| *a = *a / norm);
    }
    norm
}

fn matrix_dims<T: Real>(weight: &Tensor<T>) -> Result<(usize, usize)> {
    let rows = *weight
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("spectral norm of a scalar".into()))?;
    if rows == 0 {
        return Err(Error::Shape("spectral norm of an empty weight".into()));
    }
    Ok((rows, weight.numel() / rows))
}

impl<T: Real> SpectralState<T> {
    /// Random unit `u`; `v` follows from the first power iteration.
    pub fn new(weight_shape: &[usize], seed: u64) -> Self {
        let rows = weight_shape.first().copied().unwrap_or(1);
        let cols: usize = weight_shape.iter().skip(1).product();
        let mut rng = seeded(seed);
        let mut u: Vec<T> = (0..rows).map(|_| T::of(rng.random::<f64>() * 2.0 - 1.0)).collect();
        normalize(&mut u);
        SpectralState {
            u,
            v: vec![T::zero(); cols],
            iterations: 0,
        }
    }

    /// Run `iters` power iterations against `weight`.
    pub fn iterate(&mut self, weight: &Tensor<T>, iters: usize) -> Result<()> {
        let (rows, cols) = matrix_dims(weight)?;
        if self.u.len() != rows || self.v.len() != cols {
            return Err(Error::Shape(format!(
                "spectral state ({}, {}) does not fit weight {:?}",
                self.u.len(),
                self.v.len(),
                weight.shape()
            )));
        }
        let w = weight.data();
        let mut v = vec![T::zero(); cols];
        let mut u = vec![T::zero(); rows];
        for _ in 0..iters {
            // v = W^T u / |W^T u|, u = W v / |W v|
            matmul_into(w, true, &self.u, false, cols, rows, 1, T::zero(), &mut v);
            if normalize(&mut v).f64() <= SIGMA_FLOOR {
                break;
            }
            matmul_into(w, false, &v, false, rows, cols, 1, T::zero(), &mut u);
            if normalize(&mut u).f64() <= SIGMA_FLOOR {
                break;
            }
            self.u.copy_from_slice(&u);
            self.v.copy_from_slice(&v);
            self.iterations += 1;
        }
        Ok(())
    }

    /// `u^T W v` for the current estimates.
    pub fn sigma(&self, weight: &Tensor<T>) -> Result<T> {
        let (rows, cols) = matrix_dims(weight)?;
        let mut wv = vec![T::zero(); rows];
        matmul_into(weight.data(), false, &self.v, false, rows, cols, 1, T::zero(), &mut wv);
        Ok(wv.iter().zip(&self.u).map(|(&a, &b)| a * b).sum())
    }

    /// Record `weight / sigma` on a graph, with `u`, `v` held constant so the
    /// gradient flows through `sigma(W) = u^T W v`.
    pub fn apply(&self, graph: &mut Graph<T>, weight: Var) -> Result<Var> {
        let (rows, cols) = matrix_dims(graph.value(weight))?;
        let u = graph.constant(Tensor::new(&[1, rows], self.u.clone())?);
        let v = graph.constant(Tensor::new(&[cols, 1], self.v.clone())?);
        let mat = graph.reshape(weight, &[rows, cols])?;
        let wv = graph.matmul(mat, v)?;
        let sigma = graph.matmul(u, wv)?;
        let sigma = graph.clamp(sigma, SIGMA_FLOOR, f64::INFINITY)?;
        let sigma = graph.reshape(sigma, &[])?;
        graph.div(weight, sigma)
    }
}

/// Normalize `weight` by its power-iteration spectral norm estimate,
/// advancing `state` by `iters` iterations first.
pub fn spectral_normalize<T: Real>(
    weight: &Tensor<T>,
    state: &mut SpectralState<T>,
    iters: usize,
) -> Result<(Tensor<T>, T)> {
    state.iterate(weight, iters)?;
    let sigma = state.sigma(weight)?.max(T::of(SIGMA_FLOOR));
    Ok((weight.map(|w| w / sigma), sigma))
}
