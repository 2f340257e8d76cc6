use rand::Rng;
use retinagan::rng::seeded;
use retinagan::tensor::gradcheck::check_gradients;
use retinagan::tensor::{adam_step, AdamConfig, OptimState, Op};
use retinagan::{Graph, Result, Tensor, Var};

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;
const POINTS: usize = 20;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// Random values kept at least `gap` away from zero (kinks of relu/abs/...).
fn away_from_zero(shape: &[usize], seed: u64, gap: f64) -> Tensor<f64> {
    random(shape, seed).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    random(shape, seed).map(|v| 0.2 + v.abs())
}

/// Contract an arbitrary output with fixed random weights.
fn contract(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(g.shape(y), seed ^ 0xABCD));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let report = check_gradients(inputs, POINTS, STEP, 17, |g, v| {
        let y = f(g, v)?;
        if g.value(y).numel() == 1 {
            g.reshape(y, &[])
        } else {
            contract(g, y, 3)
        }
    })
    .unwrap();
    assert!(
        report.passes(TOL),
        "{name}: max rel error {:.3e} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn gradients_binary_broadcasting() {
    let a = random(&[2, 3, 4], 1);
    let b = random(&[3, 1], 2);
    check("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check("div", &[a, positive(&[3, 1], 4)], |g, v| g.div(v[0], v[1]));
}

#[test]
fn gradients_matmul() {
    check("matmul", &[random(&[3, 5], 1), random(&[5, 4], 2)], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn gradients_convolutions() {
    let x = random(&[2, 3, 7, 6], 1);
    let w = random(&[4, 3, 3, 3], 2);
    let b = random(&[4], 3);
    check("conv2d s1", &[x.clone(), w.clone(), b.clone()], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
    });
    check("conv2d s2", &[x.clone(), w.clone()], |g, v| g.conv2d(v[0], v[1], None, 2, 1));
    check("conv2d 1x1", &[x.clone(), random(&[5, 3, 1, 1], 4)], |g, v| {
        g.conv2d(v[0], v[1], None, 1, 0)
    });
    let wt = random(&[3, 2, 4, 4], 5);
    check("conv_transpose2d", &[x, wt, random(&[2], 6)], |g, v| {
        g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)
    });
}

#[test]
fn gradients_normalization_and_activations() {
    let x = away_from_zero(&[2, 3, 4, 4], 7, 0.01);
    check("instance_norm", &[x.clone()], |g, v| g.instance_norm(v[0], 1e-5));
    check("leaky_relu", &[x.clone()], |g, v| g.leaky_relu(v[0], 0.2));
    check("relu", &[x.clone()], |g, v| g.relu(v[0]));
    check("sigmoid", &[x.clone()], |g, v| g.sigmoid(v[0]));
    check("tanh", &[x.clone()], |g, v| g.tanh(v[0]));
    check("exp", &[x.clone()], |g, v| g.exp(v[0]));
    check("abs", &[x.clone()], |g, v| g.abs(v[0]));
    check("log", &[positive(&[3, 4], 8)], |g, v| g.log(v[0]));
    check("pow", &[positive(&[3, 4], 9)], |g, v| g.pow(v[0], 2.5));
    check("clamp", &[x.clone()], |g, v| g.clamp(v[0], -0.5, 0.5));
    check("huber", &[x.map(|v| v * 3.0)], |g, v| g.huber(v[0], 1.0));
    check("scale/shift", &[random(&[4], 2)], |g, v| {
        let a = g.scale(v[0], -1.5)?;
        g.shift(a, 0.25)
    });
}

#[test]
fn gradients_reductions_and_layout() {
    let x = random(&[2, 3, 4, 4], 11);
    check("sum", &[x.clone()], |g, v| g.sum(v[0]));
    check("mean", &[x.clone()], |g, v| g.mean(v[0]));
    check("sum axes", &[x.clone()], |g, v| g.sum_axes(v[0], &[1, 3]));
    check("mean axes", &[x.clone()], |g, v| g.mean_axes(v[0], &[2, 3]));
    check("max", &[x.clone()], |g, v| g.max_axis(v[0], 1));
    check("concat", &[x.clone(), random(&[2, 2, 4, 4], 12)], |g, v| g.concat(&[v[0], v[1]], 1));
    check("upsample", &[x.clone()], |g, v| g.upsample2x(v[0]));
    check("pad_reflect", &[x.clone()], |g, v| g.pad_reflect(v[0], 2));
    check("crop", &[x.clone()], |g, v| g.crop(v[0], 1, 0, 2, 3));
    check("reshape", &[x.clone()], |g, v| g.reshape(v[0], &[6, 16]));
    check("permute", &[x], |g, v| g.permute(v[0], &[0, 2, 3, 1]));
}

#[test]
fn apply_by_name_matches_typed_helpers() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(random(&[1, 2, 4, 4], 1));
    let a = g.apply(Op::UpsampleNearest2x, &[x]).unwrap();
    let b = g.upsample2x(x).unwrap();
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn conv_identity_kernel_is_identity() {
    let mut g = Graph::<f32>::new();
    let img = Tensor::from_fn(&[2, 3, 6, 5], |i| (i as f32 * 0.13).sin());
    let x = g.constant(img.clone());
    let mut kernel = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        kernel.data_mut()[c * 3 + c] = 1.0;
    }
    let w = g.constant(kernel);
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &img);
}

/// Direct nested-loop convolution, zero padded.
fn conv_oracle(x: &[f64], h: usize, w: usize, k: &[f64], kh: usize, stride: usize, pad: usize) -> Vec<f64> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kh) / stride + 1;
    let mut out = vec![0.0; ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            let mut acc = 0.0;
            for ky in 0..kh {
                for kx in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        acc += x[iy as usize * w + ix as usize] * k[ky * kh + kx];
                    }
                }
            }
            out[oy * wo + ox] = acc;
        }
    }
    out
}

#[test]
fn conv_ramp_average_matches_nested_loops() {
    let ramp: Vec<f64> = (0..25).map(|i| i as f64).collect();
    let avg = vec![1.0 / 9.0; 9];
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 1, 5, 5], ramp.clone()).unwrap());
        let w = g.constant(Tensor::new(&[1, 1, 3, 3], avg.clone()).unwrap());
        let y = g.conv2d(x, w, None, stride, pad).unwrap();
        let oracle = conv_oracle(&ramp, 5, 5, &avg, 3, stride, pad);
        for (a, b) in g.value(y).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {b}");
        }
    }
    // Interior of a linear ramp is preserved by averaging.
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[1, 1, 5, 5], ramp.clone()).unwrap());
    let w = g.constant(Tensor::new(&[1, 1, 3, 3], avg).unwrap());
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
    assert!((g.value(y).data()[4] - 12.0).abs() < 1e-12);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> for the same weights. A 7x7 input maps
    // to 4x4 at stride 2, pad 1, and the transpose maps 4x4 back to 7x7.
    let x = random(&[1, 3, 7, 7], 1);
    let w = random(&[4, 3, 3, 3], 2);
    let y = random(&[1, 4, 4, 4], 3);
    let mut g = Graph::<f64>::new();
    let (xv, wv, yv) = (g.constant(x.clone()), g.constant(w), g.constant(y.clone()));
    let cx = g.conv2d(xv, wv, None, 2, 1).unwrap();
    assert_eq!(g.value(cx).shape(), &[1, 4, 4, 4]);
    let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    // Transposed conv reads the weight as [cin, cout, k, k] = [4, 3, 3, 3].
    let ct = g.conv_transpose2d(yv, wv, None, 2, 1).unwrap();
    assert_eq!(g.value(ct).shape(), &[1, 3, 7, 7]);
    let rhs: f64 = g.value(ct).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
}

#[test]
fn adam_matches_scalar_reference_on_quadratic() {
    // Minimize 0.5 * a * (p - c)^2 from p0.
    let (a, c, p0) = (3.0_f64, 1.5_f64, -2.0_f64);
    let cfg = AdamConfig {
        lr: 0.05,
        beta1: 0.1,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 7e-5,
    };

    let mut p_ref = p0;
    let (mut m, mut v) = (0.0, 0.0);
    let mut reference = Vec::new();
    for t in 1..=10 {
        let g = a * (p_ref - c);
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let mhat = m / (1.0 - cfg.beta1.powi(t));
        let vhat = v / (1.0 - cfg.beta2.powi(t));
        p_ref -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        p_ref -= cfg.lr * cfg.weight_decay * p_ref;
        reference.push(p_ref);
    }

    let mut params = vec![Tensor::<f64>::scalar(p0)];
    let mut state = OptimState::new(cfg, &params);
    for (t, want) in reference.iter().enumerate() {
        let g = a * (params[0].data()[0] - c);
        adam_step(&mut params, &[Tensor::scalar(g)], &mut state).unwrap();
        let got = params[0].data()[0];
        assert!((got - want).abs() < 1e-10, "step {t}: {got} vs {want}");
    }
}

#[test]
fn tape_replay_is_deterministic_across_runs() {
    let build = || {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 7919) % 101) as f32 / 101.0));
        let w = g.param(Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 31) % 17) as f32 / 17.0 - 0.5));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        let y = g.leaky_relu(y, 0.2).unwrap();
        let y = g.mean(y).unwrap();
        g.value(y).data()[0].to_bits()
    };
    assert_eq!(build(), build());
}
