//! im2col convolution kernels (NCHW) and their adjoints.

use super::kernels::matmul_into;
use super::Real;

/// Geometry of a 2-D convolution from a `c x h x w` plane stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Some(ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }

    /// 1x1, stride 1, no padding: the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    let (s, p) = (g.stride as isize, g.pad as isize);
    for ci in 0..g.c {
        let src = &x[ci * g.in_plane()..(ci + 1) * g.in_plane()];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ky as isize - p;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *slot = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into the image.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let plane = g.out_plane();
    let (s, p) = (g.stride as isize, g.pad as isize);
    for ci in 0..g.c {
        let dst = &mut x[ci * g.in_plane()..(ci + 1) * g.in_plane()];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = W * im2col(x[n]) + b`, with `W` of shape `[o, patch]`.
pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    w: &[T],
    o: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (patch, plane) = (g.patch(), g.out_plane());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    for n in 0..batch {
        let xn = &x[n * g.c * g.in_plane()..(n + 1) * g.c * g.in_plane()];
        let on = &mut out[n * o * plane..(n + 1) * o * plane];
        let b: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        matmul_into(w, false, b, false, o, patch, plane, T::zero(), on);
        if let Some(bias) = bias {
            for (oc, &bv) in bias.iter().enumerate() {
                on[oc * plane..(oc + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

/// Gradients of [`conv2d_forward`]; each output slot is filled only when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    w: &[T],
    o: usize,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (patch, plane) = (g.patch(), g.out_plane());
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * plane }];
    let mut dcols = vec![T::zero(); patch * plane];
    for n in 0..batch {
        let xn = &x[n * g.c * g.in_plane()..(n + 1) * g.c * g.in_plane()];
        let gn = &dout[n * o * plane..(n + 1) * o * plane];
        if let Some(db) = db.as_deref_mut() {
            for (oc, slot) in db.iter_mut().enumerate() {
                *slot += gn[oc * plane..(oc + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let b: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            // dW[o, patch] += dout[o, plane] * cols[patch, plane]^T
            matmul_into(gn, false, b, true, o, plane, patch, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * g.c * g.in_plane()..(n + 1) * g.c * g.in_plane()];
            if g.is_pointwise() {
                matmul_into(w, true, gn, false, patch, o, plane, T::one(), dxn);
            } else {
                matmul_into(w, true, gn, false, patch, o, plane, T::zero(), &mut dcols);
                col2im(&dcols, g, dxn);
            }
        }
    }
}

/// Transposed convolution. `g` describes the forward conv that maps the
/// *output* (`c = out channels`, `h x w` = output size) back to the input
/// grid (`ho x wo` = input size). Weight layout is `[cin, cout*kh*kw]`.
pub(crate) fn conv_transpose2d_forward<T: Real>(
    x: &[T],
    batch: usize,
    cin: usize,
    g: &ConvGeom,
    w: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (patch, plane) = (g.patch(), g.out_plane());
    let mut cols = vec![T::zero(); patch * plane];
    let out_img = g.c * g.in_plane();
    for n in 0..batch {
        let xn = &x[n * cin * plane..(n + 1) * cin * plane];
        let on = &mut out[n * out_img..(n + 1) * out_img];
        matmul_into(w, true, xn, false, patch, cin, plane, T::zero(), &mut cols);
        col2im(&cols, g, on);
        if let Some(bias) = bias {
            for (oc, &bv) in bias.iter().enumerate() {
                on[oc * g.in_plane()..(oc + 1) * g.in_plane()]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    batch: usize,
    cin: usize,
    g: &ConvGeom,
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (patch, plane) = (g.patch(), g.out_plane());
    let mut cols = vec![T::zero(); patch * plane];
    let out_img = g.c * g.in_plane();
    for n in 0..batch {
        let xn = &x[n * cin * plane..(n + 1) * cin * plane];
        let gn = &dout[n * out_img..(n + 1) * out_img];
        if let Some(db) = db.as_deref_mut() {
            for (oc, slot) in db.iter_mut().enumerate() {
                *slot += gn[oc * g.in_plane()..(oc + 1) * g.in_plane()]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        im2col(gn, g, &mut cols);
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * cin * plane..(n + 1) * cin * plane];
            matmul_into(w, false, &cols, false, cin, patch, plane, T::one(), dxn);
        }
        if let Some(dw) = dw.as_deref_mut() {
            matmul_into(xn, false, &cols, true, cin, plane, patch, T::one(), dw);
        }
    }
}
