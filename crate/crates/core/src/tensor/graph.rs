//! The tape: a topologically ordered record of primitive applications.

use std::collections::HashMap;

use super::conv::{self, ConvGeom};
use super::kernels::{self, matmul_into};
use super::{shapes_of, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive operations. Binary arithmetic broadcasts numpy-style.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    /// `x * factor`
    Scale(f64),
    /// `x + offset`
    Shift(f64),
    /// `[m,k] x [k,n]`
    MatMul,
    /// Inputs `x [n,c,h,w]`, `w [o,c,kh,kw]`, optional `b [o]`.
    Conv2d { stride: usize, pad: usize },
    /// Inputs `x [n,cin,h,w]`, `w [cin,cout,kh,kw]`, optional `b [cout]`.
    ConvTranspose2d { stride: usize, pad: usize },
    /// Per-sample, per-channel normalization over the spatial axes.
    InstanceNorm { eps: f64 },
    LeakyRelu { slope: f64 },
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Abs,
    Pow { exponent: f64 },
    Clamp { min: f64, max: f64 },
    /// Elementwise `0.5 x^2 / delta` inside `|x| <= delta`, `|x| - delta/2` outside.
    Huber { delta: f64 },
    /// Sum over `axes`, removing them; `None` sums everything to a scalar.
    Sum { axes: Option<Vec<usize>> },
    Mean { axes: Option<Vec<usize>> },
    /// Maximum along one axis, removing it.
    Max { axis: usize },
    Concat { axis: usize },
    UpsampleNearest2x,
    PadReflect { pad: usize },
    Crop { top: usize, left: usize, height: usize, width: usize },
    Reshape { shape: Vec<usize> },
    Permute { perm: Vec<usize> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::Shift(_) => "shift",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Abs => "abs",
            Op::Pow { .. } => "pow",
            Op::Clamp { .. } => "clamp",
            Op::Huber { .. } => "huber",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Max { .. } => "max",
            Op::Concat { .. } => "concat",
            Op::UpsampleNearest2x => "upsample_nearest_2x",
            Op::PadReflect { .. } => "pad_reflect",
            Op::Crop { .. } => "crop",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
        }
    }
}

enum Saved<T> {
    None,
    /// Per-(sample, channel) inverse standard deviations.
    InvStd(Vec<T>),
    /// Flat input offsets selected by `Max`.
    ArgMax(Vec<usize>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Option<Op>,
    inputs: Vec<Var>,
    requires_grad: bool,
    saved: Saved<T>,
}

/// Reverse-mode tape. Values are computed eagerly as ops are applied.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<T: Real> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn shape_err<T: Real>(op: &Op, inputs: &[&Tensor<T>], why: &str) -> Error {
    Error::Shape(format!("{} got [{}]: {}", op.name(), shapes_of(inputs), why))
}

fn check_axes(axes: &[usize], rank: usize) -> bool {
    let mut seen = vec![false; rank];
    axes.iter().all(|&a| a < rank && !std::mem::replace(&mut seen[a], true))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            requires_grad,
            saved: Saved::None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf: gradients are reported for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(T::of(value)))
    }

    /// Copy a value into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Apply a primitive and record it on the tape.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let (value, saved) = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(&op, &vals)?
        };
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: Some(op),
            inputs: inputs.to_vec(),
            requires_grad,
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Recompute every non-leaf value from the leaves, in tape order.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                None => node.value.clone(),
                Some(op) => {
                    let vals: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &values[v.0]).collect();
                    forward(op, &vals)?.0
                }
            };
            values.push(value);
        }
        Ok(values)
    }

    /// Values currently stored on the tape, in order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes.iter().map(|n| &n.value)
    }

    /// Reverse pass from a scalar. Every trainable leaf gets an entry,
    /// zero-filled when it is not on a path to `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        let mut out = HashMap::new();
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else {
                if node.op.is_none() {
                    out.insert(id, Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            let Some(op) = &node.op else {
                out.insert(id, g);
                continue;
            };
            let wanted: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let vals: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = backward_op(op, &vals, &node.value, &node.saved, &g, &wanted);
            for ((v, gi), want) in node.inputs.iter().zip(input_grads).zip(wanted) {
                if !want {
                    continue;
                }
                let Some(gi) = gi else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        // Trainable leaves recorded after the loss never touch it.
        for (id, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.op.is_none() && node.requires_grad {
                out.insert(id, Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: out })
    }

    // Typed conveniences over `apply`.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(Op::Scale(factor), &[a])
    }
    pub fn shift(&mut self, a: Var, offset: f64) -> Result<Var> {
        self.apply(Op::Shift(offset), &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        match b {
            Some(b) => self.apply(Op::Conv2d { stride, pad }, &[x, w, b]),
            None => self.apply(Op::Conv2d { stride, pad }, &[x, w]),
        }
    }
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        match b {
            Some(b) => self.apply(Op::ConvTranspose2d { stride, pad }, &[x, w, b]),
            None => self.apply(Op::ConvTranspose2d { stride, pad }, &[x, w]),
        }
    }
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.apply(Op::InstanceNorm { eps }, &[x])
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.apply(Op::LeakyRelu { slope }, &[x])
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[x])
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Exp, &[x])
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Log, &[x])
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Abs, &[x])
    }
    pub fn pow(&mut self, x: Var, exponent: f64) -> Result<Var> {
        self.apply(Op::Pow { exponent }, &[x])
    }
    pub fn clamp(&mut self, x: Var, min: f64, max: f64) -> Result<Var> {
        self.apply(Op::Clamp { min, max }, &[x])
    }
    pub fn huber(&mut self, x: Var, delta: f64) -> Result<Var> {
        self.apply(Op::Huber { delta }, &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum { axes: None }, &[x])
    }
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Sum { axes: Some(axes.to_vec()) }, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Mean { axes: None }, &[x])
    }
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Mean { axes: Some(axes.to_vec()) }, &[x])
    }
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Max { axis }, &[x])
    }
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, xs)
    }
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::UpsampleNearest2x, &[x])
    }
    pub fn pad_reflect(&mut self, x: Var, pad: usize) -> Result<Var> {
        self.apply(Op::PadReflect { pad }, &[x])
    }
    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        self.apply(
            Op::Crop {
                top,
                left,
                height,
                width,
            },
            &[x],
        )
    }
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[x])
    }
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Op::Permute { perm: perm.to_vec() }, &[x])
    }
}

fn unary<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    x.map(f)
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map on equal shapes")
}

fn zip3_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>, f: impl Fn(T, T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::new(a.shape(), data).expect("zip3_map on equal shapes")
}

fn nchw<T: Real>(op: &Op, inputs: &[&Tensor<T>]) -> Result<[usize; 4]> {
    match inputs[0].shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(shape_err(op, inputs, "expected a rank-4 NCHW input")),
    }
}

fn expect_arity<T: Real>(op: &Op, inputs: &[&Tensor<T>], lo: usize, hi: usize) -> Result<()> {
    if inputs.len() < lo || inputs.len() > hi {
        return Err(shape_err(
            op,
            inputs,
            &format!("expected {lo}..={hi} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

fn conv_parts<T: Real>(
    op: &Op,
    inputs: &[&Tensor<T>],
    stride: usize,
    pad: usize,
    transposed: bool,
) -> Result<(ConvGeom, usize, usize)> {
    let [n, c, h, w] = nchw(op, inputs)?;
    let ws = inputs[1].shape();
    if ws.len() != 4 || ws[if transposed { 0 } else { 1 }] != c {
        return Err(shape_err(op, inputs, "weight channels do not match input"));
    }
    let out_ch = if transposed { ws[1] } else { ws[0] };
    if let Some(b) = inputs.get(2) {
        if b.shape() != [out_ch] {
            return Err(shape_err(op, inputs, "bias must be [out_channels]"));
        }
    }
    let (kh, kw) = (ws[2], ws[3]);
    if transposed {
        if stride == 0 || (h - 1) * stride + kh < 2 * pad + 1 {
            return Err(shape_err(op, inputs, "degenerate transposed geometry"));
        }
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (w - 1) * stride + kw - 2 * pad;
        let g = ConvGeom::new(out_ch, oh, ow, kh, kw, stride, pad)
            .filter(|g| g.ho == h && g.wo == w)
            .ok_or_else(|| shape_err(op, inputs, "inconsistent transposed geometry"))?;
        Ok((g, n, out_ch))
    } else {
        let g = ConvGeom::new(c, h, w, kh, kw, stride, pad)
            .ok_or_else(|| shape_err(op, inputs, "kernel larger than padded input"))?;
        Ok((g, n, out_ch))
    }
}

fn forward<T: Real>(op: &Op, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Saved<T>)> {
    let arity = match op {
        Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul => (2, 2),
        Op::Conv2d { .. } | Op::ConvTranspose2d { .. } => (2, 3),
        Op::Concat { .. } => (1, usize::MAX),
        _ => (1, 1),
    };
    expect_arity(op, inputs, arity.0, arity.1)?;
    let x = inputs[0];
    let out = match op {
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let b = inputs[1];
            let shape = kernels::broadcast_shape(x.shape(), b.shape())
                .ok_or_else(|| shape_err(op, inputs, "shapes do not broadcast"))?;
            match op {
                Op::Add => kernels::binary(x, b, &shape, |p, q| p + q),
                Op::Sub => kernels::binary(x, b, &shape, |p, q| p - q),
                Op::Mul => kernels::binary(x, b, &shape, |p, q| p * q),
                _ => kernels::binary(x, b, &shape, |p, q| p / q),
            }
        }
        Op::Scale(f) => {
            let f = T::of(*f);
            unary(x, |v| v * f)
        }
        Op::Shift(c) => {
            let c = T::of(*c);
            unary(x, |v| v + c)
        }
        Op::MatMul => {
            let b = inputs[1];
            let (&[m, k], &[k2, n]) = (x.shape(), b.shape()) else {
                return Err(shape_err(op, inputs, "matmul needs two matrices"));
            };
            if k != k2 {
                return Err(shape_err(op, inputs, "inner dimensions differ"));
            }
            let mut out = Tensor::zeros(&[m, n]);
            matmul_into(x.data(), false, b.data(), false, m, k, n, T::zero(), out.data_mut());
            out
        }
        Op::Conv2d { stride, pad } => {
            let (g, n, o) = conv_parts(op, inputs, *stride, *pad, false)?;
            let mut out = Tensor::zeros(&[n, o, g.ho, g.wo]);
            let bias = inputs.get(2).map(|b| b.data());
            conv::conv2d_forward(x.data(), n, &g, inputs[1].data(), o, bias, out.data_mut());
            out
        }
        Op::ConvTranspose2d { stride, pad } => {
            let (g, n, o) = conv_parts(op, inputs, *stride, *pad, true)?;
            let cin = x.shape()[1];
            let mut out = Tensor::zeros(&[n, o, g.h, g.w]);
            let bias = inputs.get(2).map(|b| b.data());
            conv::conv_transpose2d_forward(x.data(), n, cin, &g, inputs[1].data(), bias, out.data_mut());
            out
        }
        Op::InstanceNorm { eps } => {
            let [n, c, h, w] = nchw(op, inputs)?;
            let plane = h * w;
            if plane < 2 {
                return Err(shape_err(op, inputs, "instance norm needs at least 2 spatial positions"));
            }
            let mut out = Tensor::zeros(x.shape());
            let mut inv = Vec::with_capacity(n * c);
            let eps = T::of(*eps);
            let count = T::of(plane as f64);
            for (src, dst) in x.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
                let mean = src.iter().copied().sum::<T>() / count;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
                let r = T::one() / (var + eps).sqrt();
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - mean) * r;
                }
                inv.push(r);
            }
            return Ok((out, Saved::InvStd(inv)));
        }
        Op::LeakyRelu { slope } => {
            let s = T::of(*slope);
            unary(x, |v| if v > T::zero() { v } else { v * s })
        }
        Op::Relu => unary(x, |v| v.max(T::zero())),
        Op::Sigmoid => unary(x, |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        }),
        Op::Tanh => unary(x, |v| v.tanh()),
        Op::Exp => unary(x, |v| v.exp()),
        Op::Log => unary(x, |v| v.ln()),
        Op::Abs => unary(x, |v| v.abs()),
        Op::Pow { exponent } => {
            let e = T::of(*exponent);
            unary(x, |v| v.powf(e))
        }
        Op::Clamp { min, max } => {
            let (lo, hi) = (T::of(*min), T::of(*max));
            unary(x, |v| v.max(lo).min(hi))
        }
        Op::Huber { delta } => {
            let d = T::of(*delta);
            let half = T::of(0.5);
            unary(x, |v| {
                let a = v.abs();
                if a <= d {
                    half * v * v / d
                } else {
                    a - half * d
                }
            })
        }
        Op::Sum { axes } | Op::Mean { axes } => {
            let all: Vec<usize>;
            let axes = match axes {
                Some(a) => a.as_slice(),
                None => {
                    all = (0..x.rank()).collect();
                    &all
                }
            };
            if !check_axes(axes, x.rank()) {
                return Err(shape_err(op, inputs, "invalid reduction axes"));
            }
            let mut out = kernels::sum_axes(x, axes);
            if matches!(op, Op::Mean { .. }) {
                let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
                if count == 0 {
                    return Err(shape_err(op, inputs, "mean over an empty extent"));
                }
                let inv = T::one() / T::of(count as f64);
                out.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            out
        }
        Op::Max { axis } => {
            let axis = *axis;
            if axis >= x.rank() || x.shape()[axis] == 0 {
                return Err(shape_err(op, inputs, "invalid max axis"));
            }
            let outer: usize = x.shape()[..axis].iter().product();
            let len = x.shape()[axis];
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            let mut data = Vec::with_capacity(outer * inner);
            let mut arg = Vec::with_capacity(outer * inner);
            let xd = x.data();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut best = base;
                    for j in 1..len {
                        let off = base + j * inner;
                        if xd[off] > xd[best] {
                            best = off;
                        }
                    }
                    data.push(xd[best]);
                    arg.push(best);
                }
            }
            return Ok((Tensor::new(&shape, data)?, Saved::ArgMax(arg)));
        }
        Op::Concat { axis } => {
            let axis = *axis;
            let first = x.shape();
            if axis >= first.len() {
                return Err(shape_err(op, inputs, "concat axis out of range"));
            }
            for t in inputs {
                let s = t.shape();
                if s.len() != first.len()
                    || s.iter().zip(first).enumerate().any(|(d, (a, b))| d != axis && a != b)
                {
                    return Err(shape_err(op, inputs, "concat inputs differ off-axis"));
                }
            }
            let outer: usize = first[..axis].iter().product();
            let total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
            let mut shape = first.to_vec();
            shape[axis] = total;
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in inputs {
                    let block: usize = t.shape()[axis..].iter().product();
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor::new(&shape, data)?
        }
        Op::UpsampleNearest2x => {
            let [n, c, h, w] = nchw(op, inputs)?;
            let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
            let od = out.data_mut();
            for (p, src) in x.data().chunks(h * w).enumerate() {
                let dst = &mut od[p * 4 * h * w..(p + 1) * 4 * h * w];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                    }
                }
            }
            out
        }
        Op::PadReflect { pad } => {
            let [n, c, h, w] = nchw(op, inputs)?;
            let p = *pad;
            if p >= h || p >= w {
                return Err(shape_err(op, inputs, "reflection pad must be smaller than the input"));
            }
            let (oh, ow) = (h + 2 * p, w + 2 * p);
            let mut out = Tensor::zeros(&[n, c, oh, ow]);
            let od = out.data_mut();
            for (pl, src) in x.data().chunks(h * w).enumerate() {
                let dst = &mut od[pl * oh * ow..(pl + 1) * oh * ow];
                for y in 0..oh {
                    let sy = reflect(y as isize - p as isize, h);
                    for xx in 0..ow {
                        let sx = reflect(xx as isize - p as isize, w);
                        dst[y * ow + xx] = src[sy * w + sx];
                    }
                }
            }
            out
        }
        Op::Crop {
            top,
            left,
            height,
            width,
        } => {
            let [n, c, h, w] = nchw(op, inputs)?;
            if top + height > h || left + width > w || *height == 0 || *width == 0 {
                return Err(shape_err(op, inputs, "crop window outside the input"));
            }
            let mut data = Vec::with_capacity(n * c * height * width);
            for src in x.data().chunks(h * w) {
                for y in *top..top + height {
                    data.extend_from_slice(&src[y * w + left..y * w + left + width]);
                }
            }
            Tensor::new(&[n, c, *height, *width], data)?
        }
        Op::Reshape { shape } => {
            if shape.iter().product::<usize>() != x.numel() {
                return Err(shape_err(op, inputs, &format!("cannot reshape into {shape:?}")));
            }
            x.clone().reshape(shape)?
        }
        Op::Permute { perm } => {
            if perm.len() != x.rank() || !check_axes(perm, x.rank()) {
                return Err(shape_err(op, inputs, &format!("invalid permutation {perm:?}")));
            }
            kernels::permute(x, perm)
        }
    };
    Ok((out, Saved::None))
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

fn backward_op<T: Real>(
    op: &Op,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    saved: &Saved<T>,
    g: &Tensor<T>,
    wanted: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let x = inputs[0];
    let one = T::one();
    match op {
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let b = inputs[1];
            let ga = wanted[0].then(|| match op {
                Op::Add | Op::Sub => kernels::reduce_to(g, x.shape()),
                Op::Mul => kernels::reduce_to(&kernels::binary(g, b, g.shape(), |p, q| p * q), x.shape()),
                _ => kernels::reduce_to(&kernels::binary(g, b, g.shape(), |p, q| p / q), x.shape()),
            });
            let gb = wanted[1].then(|| match op {
                Op::Add => kernels::reduce_to(g, b.shape()),
                Op::Sub => kernels::reduce_to(&g.map(|v| -v), b.shape()),
                Op::Mul => kernels::reduce_to(&kernels::binary(g, x, g.shape(), |p, q| p * q), b.shape()),
                _ => {
                    // d(a/b)/db = -out / b
                    let t = zip_map(g, out, |p, q| -p * q);
                    kernels::reduce_to(&kernels::binary(&t, b, g.shape(), |p, q| p / q), b.shape())
                }
            });
            vec![ga, gb]
        }
        Op::Scale(f) => {
            let f = T::of(*f);
            vec![Some(g.map(|v| v * f))]
        }
        Op::Shift(_) => vec![Some(g.clone())],
        Op::MatMul => {
            let b = inputs[1];
            let (m, k, n) = (x.shape()[0], x.shape()[1], b.shape()[1]);
            let ga = wanted[0].then(|| {
                let mut t = Tensor::zeros(&[m, k]);
                matmul_into(g.data(), false, b.data(), true, m, n, k, T::zero(), t.data_mut());
                t
            });
            let gb = wanted[1].then(|| {
                let mut t = Tensor::zeros(&[k, n]);
                matmul_into(x.data(), true, g.data(), false, k, m, n, T::zero(), t.data_mut());
                t
            });
            vec![ga, gb]
        }
        Op::Conv2d { stride, pad } => {
            let (geom, n, o) = conv_parts(op, inputs, *stride, *pad, false).expect("validated in forward");
            let mut dx = wanted[0].then(|| Tensor::zeros(x.shape()));
            let mut dw = wanted[1].then(|| Tensor::zeros(inputs[1].shape()));
            let mut db = inputs
                .get(2)
                .and(wanted.get(2).copied().filter(|&w| w))
                .map(|_| Tensor::zeros(&[o]));
            conv::conv2d_backward(
                x.data(),
                n,
                &geom,
                inputs[1].data(),
                o,
                g.data(),
                dx.as_mut().map(|t| t.data_mut()),
                dw.as_mut().map(|t| t.data_mut()),
                db.as_mut().map(|t| t.data_mut()),
            );
            let mut r = vec![dx, dw];
            if inputs.len() == 3 {
                r.push(db);
            }
            r
        }
        Op::ConvTranspose2d { stride, pad } => {
            let (geom, n, o) = conv_parts(op, inputs, *stride, *pad, true).expect("validated in forward");
            let cin = x.shape()[1];
            let mut dx = wanted[0].then(|| Tensor::zeros(x.shape()));
            let mut dw = wanted[1].then(|| Tensor::zeros(inputs[1].shape()));
            let mut db = inputs
                .get(2)
                .and(wanted.get(2).copied().filter(|&w| w))
                .map(|_| Tensor::zeros(&[o]));
            conv::conv_transpose2d_backward(
                x.data(),
                n,
                cin,
                &geom,
                inputs[1].data(),
                g.data(),
                dx.as_mut().map(|t| t.data_mut()),
                dw.as_mut().map(|t| t.data_mut()),
                db.as_mut().map(|t| t.data_mut()),
            );
            let mut r = vec![dx, dw];
            if inputs.len() == 3 {
                r.push(db);
            }
            r
        }
        Op::InstanceNorm { .. } => {
            let Saved::InvStd(inv) = saved else {
                unreachable!("instance norm saves inverse std")
            };
            let plane = x.shape()[2] * x.shape()[3];
            let count = T::of(plane as f64);
            let mut dx = Tensor::zeros(x.shape());
            for (((gd, yd), dd), &r) in g
                .data()
                .chunks(plane)
                .zip(out.data().chunks(plane))
                .zip(dx.data_mut().chunks_mut(plane))
                .zip(inv)
            {
                let sg: T = gd.iter().copied().sum();
                let sgy: T = gd.iter().zip(yd).map(|(&a, &b)| a * b).sum();
                for ((d, &gv), &yv) in dd.iter_mut().zip(gd).zip(yd) {
                    *d = r / count * (count * gv - sg - yv * sgy);
                }
            }
            vec![Some(dx)]
        }
        Op::LeakyRelu { slope } => {
            let s = T::of(*slope);
            vec![Some(zip_map(g, x, |gv, xv| if xv > T::zero() { gv } else { gv * s }))]
        }
        Op::Relu => vec![Some(zip_map(g, x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }))],
        Op::Sigmoid => vec![Some(zip_map(g, out, |gv, y| gv * y * (one - y)))],
        Op::Tanh => vec![Some(zip_map(g, out, |gv, y| gv * (one - y * y)))],
        Op::Exp => vec![Some(zip_map(g, out, |gv, y| gv * y))],
        Op::Log => vec![Some(zip_map(g, x, |gv, xv| gv / xv))],
        Op::Abs => vec![Some(zip_map(g, x, |gv, xv| {
            if xv > T::zero() {
                gv
            } else if xv < T::zero() {
                -gv
            } else {
                T::zero()
            }
        }))],
        Op::Pow { exponent } => {
            let e = T::of(*exponent);
            vec![Some(zip3_map(g, x, out, |gv, xv, yv| {
                if e == T::zero() {
                    T::zero()
                } else if xv == T::zero() {
                    if e == one {
                        gv
                    } else {
                        T::zero()
                    }
                } else {
                    gv * e * yv / xv
                }
            }))]
        }
        Op::Clamp { min, max } => {
            let (lo, hi) = (T::of(*min), T::of(*max));
            vec![Some(zip_map(g, x, |gv, xv| {
                if xv >= lo && xv <= hi {
                    gv
                } else {
                    T::zero()
                }
            }))]
        }
        Op::Huber { delta } => {
            let d = T::of(*delta);
            vec![Some(zip_map(g, x, |gv, xv| gv * (xv / d).max(-one).min(one)))]
        }
        Op::Sum { axes } | Op::Mean { axes } => {
            let all: Vec<usize>;
            let axes = match axes {
                Some(a) => a.as_slice(),
                None => {
                    all = (0..x.rank()).collect();
                    &all
                }
            };
            let scale = if matches!(op, Op::Mean { .. }) {
                let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
                one / T::of(count as f64)
            } else {
                one
            };
            vec![Some(kernels::expand_axes(g, x.shape(), axes, scale))]
        }
        Op::Max { .. } => {
            let Saved::ArgMax(arg) = saved else {
                unreachable!("max saves argmax offsets")
            };
            let mut dx = Tensor::zeros(x.shape());
            let dd = dx.data_mut();
            for (&off, &gv) in arg.iter().zip(g.data()) {
                dd[off] += gv;
            }
            vec![Some(dx)]
        }
        Op::Concat { axis } => {
            let axis = *axis;
            let outer: usize = x.shape()[..axis].iter().product();
            let total_block: usize = g.shape()[axis..].iter().product();
            let mut offset = 0;
            let mut result = Vec::with_capacity(inputs.len());
            for (t, &want) in inputs.iter().zip(wanted) {
                let block: usize = t.shape()[axis..].iter().product();
                if want {
                    let mut data = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let start = o * total_block + offset;
                        data.extend_from_slice(&g.data()[start..start + block]);
                    }
                    result.push(Some(Tensor::new(t.shape(), data).expect("concat grad")));
                } else {
                    result.push(None);
                }
                offset += block;
            }
            result
        }
        Op::UpsampleNearest2x => {
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let mut dx = Tensor::zeros(x.shape());
            for (src, dst) in g.data().chunks(4 * h * w).zip(dx.data_mut().chunks_mut(h * w)) {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::PadReflect { pad } => {
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let p = *pad;
            let (oh, ow) = (h + 2 * p, w + 2 * p);
            let mut dx = Tensor::zeros(x.shape());
            for (src, dst) in g.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
                for y in 0..oh {
                    let sy = reflect(y as isize - p as isize, h);
                    for xx in 0..ow {
                        let sx = reflect(xx as isize - p as isize, w);
                        dst[sy * w + sx] += src[y * ow + xx];
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::Crop {
            top,
            left,
            height,
            width,
        } => {
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let mut dx = Tensor::zeros(x.shape());
            for (src, dst) in g.data().chunks(height * width).zip(dx.data_mut().chunks_mut(h * w)) {
                for (r, y) in (*top..top + height).enumerate() {
                    dst[y * w + left..y * w + left + width].copy_from_slice(&src[r * width..(r + 1) * width]);
                }
            }
            vec![Some(dx)]
        }
        Op::Reshape { .. } => vec![Some(g.clone().reshape(x.shape()).expect("reshape grad"))],
        Op::Permute { perm } => vec![Some(kernels::permute(g, &kernels::inverse_permutation(perm)))],
    }
}
