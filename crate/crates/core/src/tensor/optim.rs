use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Adam hyperparameters; weight decay is decoupled from the adaptive step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.1,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 7e-5,
        }
    }
}

/// First/second moment buffers for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Real = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        OptimState {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update, then `p *= 1 - lr * weight_decay`.
pub fn adam_step<T: Real>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut OptimState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape(format!(
                "adam: parameter {i} has shape {:?}, gradient {:?}, moments {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
        if g.data().iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument(format!("adam: NaN in gradient {i}")));
        }
    }
    let c = state.config;
    let t = state.step + 1;
    let bc1 = T::of(1.0 - c.beta1.powi(t as i32));
    let bc2 = T::of(1.0 - c.beta2.powi(t as i32));
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (lr, eps) = (T::of(c.lr), T::of(c.eps));
    let decay = T::one() - T::of(c.lr * c.weight_decay);
    let one = T::one();
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
            *pv *= decay;
        }
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(weight_decay: f64) -> AdamConfig {
        AdamConfig {
            weight_decay,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut params = vec![Tensor::<f64>::from_fn(&[5], |i| i as f64 - 2.0)];
        let before = params.clone();
        let mut st = OptimState::new(cfg(0.0), &params);
        for _ in 0..3 {
            adam_step(&mut params, &[Tensor::zeros(&[5])], &mut st).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut params = vec![Tensor::<f64>::zeros(&[3])];
        let grads = vec![Tensor::new(&[3], vec![2.5, -0.01, 40.0]).unwrap()];
        let mut st = OptimState::new(cfg(0.0), &params);
        adam_step(&mut params, &grads, &mut st).unwrap();
        for (p, g) in params[0].data().iter().zip(grads[0].data()) {
            let expected = -1e-4 * g.signum();
            assert!((p - expected).abs() < 1e-9, "{p} vs {expected}");
        }
    }

    #[test]
    fn nan_gradient_rejected() {
        let mut params = vec![Tensor::<f32>::zeros(&[2])];
        let mut st = OptimState::new(cfg(0.0), &params);
        let grads = vec![Tensor::new(&[2], vec![f32::NAN, 0.0]).unwrap()];
        assert!(adam_step(&mut params, &grads, &mut st).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Tensor::<f32>::zeros(&[2])];
        let mut st = OptimState::new(cfg(0.0), &params);
        assert!(adam_step(&mut params, &[Tensor::zeros(&[3])], &mut st).is_err());
    }
}
