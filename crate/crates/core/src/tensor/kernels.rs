//! Stride-walking helpers for broadcasting, reductions and layout changes.

use super::{Real, Tensor};

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Numpy-style broadcast of two shapes, aligned at the trailing axis.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out_shape`; broadcast axes get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visit every index of `shape` in row-major order, passing the offsets of
/// two strided views.
pub(crate) fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let nd = shape.len();
    if nd == 0 {
        f(0, 0);
        return;
    }
    let inner = shape[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let outer: usize = shape[..nd - 1].iter().product();
    if inner == 0 || outer == 0 {
        return;
    }
    let mut idx = vec![0usize; nd - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..outer {
        let (mut pa, mut pb) = (oa, ob);
        for _ in 0..inner {
            f(pa, pb);
            pa += ia;
            pb += ib;
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(out_shape, data).expect("same-shape binary");
    }
    let (ad, bd) = (a.data(), b.data());
    if b.numel() == 1 {
        let y = bd[0];
        let data = ad.iter().map(|&x| f(x, y)).collect();
        return Tensor::new(out_shape, data).expect("scalar-rhs binary");
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut data = Vec::with_capacity(out_shape.iter().product());
    walk2(out_shape, &sa, &sb, |pa, pb| data.push(f(ad[pa], bd[pb])));
    Tensor::new(out_shape, data).expect("broadcast binary")
}

/// Sum a full-shape gradient down to a broadcast source shape.
pub(crate) fn reduce_to<T: Real>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let mut out = Tensor::zeros(target);
    let st = broadcast_strides(target, g.shape());
    let sg = contiguous_strides(g.shape());
    let gd = g.data();
    let od = out.data_mut();
    walk2(g.shape(), &sg, &st, |pg, pt| od[pt] += gd[pg]);
    out
}

/// Shape after removing `axes`, plus the strides of that reduced layout
/// inside the full index space (0 on removed axes).
pub(crate) fn reduced_layout(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    let out_shape: Vec<usize> = kept.iter().map(|&d| shape[d]).collect();
    let out_strides = contiguous_strides(&out_shape);
    let mut strides = vec![0; shape.len()];
    for (k, &d) in kept.iter().enumerate() {
        strides[d] = out_strides[k];
    }
    (out_shape, strides)
}

pub(crate) fn sum_axes<T: Real>(t: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let (out_shape, st) = reduced_layout(t.shape(), axes);
    let mut out = Tensor::zeros(&out_shape);
    let src = contiguous_strides(t.shape());
    let td = t.data();
    let od = out.data_mut();
    walk2(t.shape(), &src, &st, |ps, po| od[po] += td[ps]);
    out
}

/// Inverse of `sum_axes` for gradients: copy `g` back over the removed axes.
pub(crate) fn expand_axes<T: Real>(g: &Tensor<T>, full: &[usize], axes: &[usize], scale: T) -> Tensor<T> {
    let (_, sg) = reduced_layout(full, axes);
    let mut data = Vec::with_capacity(full.iter().product());
    let gd = g.data();
    let dst = contiguous_strides(full);
    walk2(full, &dst, &sg, |_, pg| data.push(gd[pg] * scale));
    Tensor::new(full, data).expect("expand_axes")
}

pub(crate) fn permute<T: Real>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let src = contiguous_strides(t.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let sp: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let dst = contiguous_strides(&out_shape);
    let td = t.data();
    let mut data = Vec::with_capacity(t.numel());
    walk2(&out_shape, &dst, &sp, |_, ps| data.push(td[ps]));
    Tensor::new(&out_shape, data).expect("permute")
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Row-major `[m,k] x [k,n]`, with optional transposes expressed through strides.
pub(crate) fn matmul_into<T: Real>(
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
    beta: T,
    c: &mut [T],
) {
    // Stored layouts: a is [m,k] (or [k,m] when a_t), b is [k,n] (or [n,k]).
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m*k, k*n, m*n prefixes
    // checked by the debug assertion; callers pass exactly-sized buffers.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
