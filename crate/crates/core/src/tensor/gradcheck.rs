//! Central finite-difference checks for anything built on [`Graph`].

use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::rng::seeded;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval(inputs: &[Tensor<f64>], f: &impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Compare analytic gradients with central differences at `points` randomly
/// chosen input coordinates. All inputs are treated as differentiable.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    points: usize,
    step: f64,
    seed: u64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = seeded(seed);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for _ in 0..points.min(total) {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let orig = probe[which].data()[flat];
        probe[which].data_mut()[flat] = orig + step;
        let up = eval(&probe, &f)?;
        probe[which].data_mut()[flat] = orig - step;
        let down = eval(&probe, &f)?;
        probe[which].data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[which].data()[flat];
        let err = relative_error(a, numeric, 1e-6);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some((which, flat, a, numeric));
            }
        }
        report.checked += 1;
    }
    Ok(report)
}
