//! Convolution, transposed convolution and instance-norm kernels.
//!
//! Batched entry points split work per sample with rayon and reduce
//! per-sample weight gradients in sample order, so results are bitwise
//! independent of the worker count.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Geometry of a strided 2-D window sweep over an image `(c, h, w)` that
/// produces a grid `(oh, ow)` of window positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    /// Output extent of a convolution along one axis, `None` if the kernel
    /// does not fit.
    pub fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let span = n + 2 * pad;
        if span < k || stride == 0 {
            None
        } else {
            Some((span - k) / stride + 1)
        }
    }

    /// Output extent of a fractionally-strided convolution along one axis.
    pub fn conv_transpose_out(n: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> Option<usize> {
        let full = (n.checked_sub(1)?) * stride + k + out_pad;
        full.checked_sub(2 * pad).filter(|&v| v > 0)
    }

    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

pub fn im2col<T: Scalar>(g: &Geometry, img: &[T], cols: &mut [T]) {
    let n = g.cols();
    let (h, w) = (g.h as isize, g.w as isize);
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns into `img` (overwritten).
pub fn col2im<T: Scalar>(g: &Geometry, cols: &[T], img: &mut [T]) {
    img.fill(T::zero());
    let n = g.cols();
    let (h, w) = (g.h as isize, g.w as isize);
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: Option<&[T]>, plane: usize) {
    if let Some(b) = bias {
        for (ch, chunk) in out.chunks_mut(plane).enumerate() {
            let v = b[ch];
            for o in chunk {
                *o += v;
            }
        }
    }
}

fn bias_grad<T: Scalar>(dy: &[T], co: usize, plane: usize, db: &mut [T]) {
    for ch in 0..co {
        db[ch] += dy[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>();
    }
}

/// Weight and bias gradients plus input gradient of a batched op.
pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

/// Output channel count at or below which stride-1 convolutions skip
/// im2col and run as shifted row sweeps.
const DIRECT_MAX_CO: usize = 4;

fn use_direct(g: &Geometry, co: usize) -> bool {
    g.stride == 1 && co <= DIRECT_MAX_CO
}

/// Zero-padded copy of `img`, planes of `(h + 2p, w + 2p)`.
fn pad_image<T: Scalar>(g: &Geometry, img: &[T]) -> Vec<T> {
    let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    let mut out = vec![T::zero(); g.c * hp * wp];
    for c in 0..g.c {
        for y in 0..g.h {
            let src = &img[(c * g.h + y) * g.w..(c * g.h + y + 1) * g.w];
            let at = (c * hp + y + g.pad) * wp + g.pad;
            out[at..at + g.w].copy_from_slice(src);
        }
    }
    out
}

fn direct_forward<T: Scalar>(g: &Geometry, co: usize, img: &[T], w: &[T], y: &mut [T]) {
    let xp = pad_image(g, img);
    let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    let plane = g.cols();
    for o in 0..co {
        let yo = &mut y[o * plane..(o + 1) * plane];
        for c in 0..g.c {
            let xc = &xp[c * hp * wp..(c + 1) * hp * wp];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let wv = w[((o * g.c + c) * g.k + ki) * g.k + kj];
                    for oy in 0..g.oh {
                        let at = (oy + ki) * wp + kj;
                        let src = &xc[at..at + g.ow];
                        let dst = &mut yo[oy * g.ow..(oy + 1) * g.ow];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

fn direct_dw<T: Scalar>(g: &Geometry, co: usize, img: &[T], dy: &[T]) -> Vec<T> {
    let xp = pad_image(g, img);
    let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    let plane = g.cols();
    let mut dw = vec![T::zero(); co * g.rows()];
    let mut lanes = vec![T::zero(); g.ow];
    for o in 0..co {
        let dyo = &dy[o * plane..(o + 1) * plane];
        for c in 0..g.c {
            let xc = &xp[c * hp * wp..(c + 1) * hp * wp];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    lanes.fill(T::zero());
                    for oy in 0..g.oh {
                        let at = (oy + ki) * wp + kj;
                        let src = &xc[at..at + g.ow];
                        let grad = &dyo[oy * g.ow..(oy + 1) * g.ow];
                        for ((l, &a), &b) in lanes.iter_mut().zip(src).zip(grad) {
                            *l += a * b;
                        }
                    }
                    dw[((o * g.c + c) * g.k + ki) * g.k + kj] = lanes.iter().copied().sum::<T>();
                }
            }
        }
    }
    dw
}

fn direct_dx<T: Scalar>(g: &Geometry, co: usize, w: &[T], dy: &[T]) -> Vec<T> {
    let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    let plane = g.cols();
    let mut dxp = vec![T::zero(); g.c * hp * wp];
    for c in 0..g.c {
        let dc = &mut dxp[c * hp * wp..(c + 1) * hp * wp];
        for o in 0..co {
            let dyo = &dy[o * plane..(o + 1) * plane];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let wv = w[((o * g.c + c) * g.k + ki) * g.k + kj];
                    for oy in 0..g.oh {
                        let at = (oy + ki) * wp + kj;
                        let dst = &mut dc[at..at + g.ow];
                        let grad = &dyo[oy * g.ow..(oy + 1) * g.ow];
                        for (d, &s) in dst.iter_mut().zip(grad) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    let mut dx = vec![T::zero(); g.image_len()];
    for c in 0..g.c {
        for y in 0..g.h {
            let at = (c * hp + y + g.pad) * wp + g.pad;
            dx[(c * g.h + y) * g.w..(c * g.h + y + 1) * g.w].copy_from_slice(&dxp[at..at + g.w]);
        }
    }
    dx
}

/// Convolution of `x (batch, g.c, g.h, g.w)` with `w (co, g.c, k, k)`.
pub fn conv2d_forward<T: Scalar>(
    g: &Geometry,
    batch: usize,
    co: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_len = g.image_len();
    let out_len = co * g.cols();
    let mut out = vec![T::zero(); batch * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(b, y)| {
        let xb = &x[b * in_len..(b + 1) * in_len];
        if use_direct(g, co) {
            direct_forward(g, co, xb, w, y);
        } else {
            let mut cols = vec![T::zero(); g.rows() * g.cols()];
            im2col(g, xb, &mut cols);
            T::gemm(co, g.rows(), g.cols(), w, false, &cols, false, y, false);
        }
        add_bias(y, bias, g.cols());
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    g: &Geometry,
    batch: usize,
    co: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let in_len = g.image_len();
    let out_len = co * g.cols();
    let (rows, ncols) = (g.rows(), g.cols());
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let dyb = &dy[b * out_len..(b + 1) * out_len];
            if use_direct(g, co) {
                let dw = need_dw.then(|| direct_dw(g, co, &x[b * in_len..(b + 1) * in_len], dyb));
                let dx = need_dx.then(|| direct_dx(g, co, w, dyb));
                return (dx, dw);
            }
            let dw = need_dw.then(|| {
                let mut cols = vec![T::zero(); rows * ncols];
                im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
                let mut dw = vec![T::zero(); co * rows];
                T::gemm(co, ncols, rows, dyb, false, &cols, true, &mut dw, false);
                dw
            });
            let dx = need_dx.then(|| {
                let mut dcols = vec![T::zero(); rows * ncols];
                T::gemm(rows, co, ncols, w, true, dyb, false, &mut dcols, false);
                let mut dx = vec![T::zero(); in_len];
                col2im(g, &dcols, &mut dx);
                dx
            });
            (dx, dw)
        })
        .collect();
    let mut dx_all = need_dx.then(|| Vec::with_capacity(batch * in_len));
    let mut dw_all = need_dw.then(|| vec![T::zero(); co * rows]);
    for (dx, dw) in per_sample {
        if let (Some(all), Some(d)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&d);
        }
        if let (Some(all), Some(d)) = (dw_all.as_mut(), dw) {
            for (a, v) in all.iter_mut().zip(d) {
                *a += v;
            }
        }
    }
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); co];
        for b in 0..batch {
            bias_grad(&dy[b * out_len..(b + 1) * out_len], co, ncols, &mut db);
        }
        db
    });
    ConvGrads {
        dx: dx_all,
        dw: dw_all,
        db,
    }
}

/// Fractionally-strided convolution. `g` describes the *output* image
/// `(co, oh, ow)` swept to the input grid `(h_in, w_in)` = `(g.oh, g.ow)`;
/// `x` is `(batch, ci, g.oh, g.ow)`, `w` is `(ci, co, k, k)`.
pub fn conv_transpose2d_forward<T: Scalar>(
    g: &Geometry,
    batch: usize,
    ci: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_len = ci * g.cols();
    let out_len = g.image_len();
    let mut out = vec![T::zero(); batch * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(b, y)| {
        let mut cols = vec![T::zero(); g.rows() * g.cols()];
        T::gemm(
            g.rows(),
            ci,
            g.cols(),
            w,
            true,
            &x[b * in_len..(b + 1) * in_len],
            false,
            &mut cols,
            false,
        );
        col2im(g, &cols, y);
        add_bias(y, bias, g.h * g.w);
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Scalar>(
    g: &Geometry,
    batch: usize,
    ci: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let in_len = ci * g.cols();
    let out_len = g.image_len();
    let (rows, ncols) = (g.rows(), g.cols());
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            if !need_dx && !need_dw {
                return (None, None);
            }
            let mut dcols = vec![T::zero(); rows * ncols];
            im2col(g, &dy[b * out_len..(b + 1) * out_len], &mut dcols);
            let dx = need_dx.then(|| {
                let mut dx = vec![T::zero(); in_len];
                T::gemm(ci, rows, ncols, w, false, &dcols, false, &mut dx, false);
                dx
            });
            let dw = need_dw.then(|| {
                let mut dw = vec![T::zero(); ci * rows];
                T::gemm(
                    ci,
                    ncols,
                    rows,
                    &x[b * in_len..(b + 1) * in_len],
                    false,
                    &dcols,
                    true,
                    &mut dw,
                    false,
                );
                dw
            });
            (dx, dw)
        })
        .collect();
    let mut dx_all = need_dx.then(|| Vec::with_capacity(batch * in_len));
    let mut dw_all = need_dw.then(|| vec![T::zero(); ci * rows]);
    for (dx, dw) in per_sample {
        if let (Some(all), Some(d)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&d);
        }
        if let (Some(all), Some(d)) = (dw_all.as_mut(), dw) {
            for (a, v) in all.iter_mut().zip(d) {
                *a += v;
            }
        }
    }
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.c];
        for b in 0..batch {
            bias_grad(&dy[b * out_len..(b + 1) * out_len], g.c, g.h * g.w, &mut db);
        }
        db
    });
    ConvGrads {
        dx: dx_all,
        dw: dw_all,
        db,
    }
}

/// Normalizes every `(sample, channel)` plane to zero mean and unit
/// variance. Returns the output and the per-plane inverse std.
pub fn instance_norm_forward<T: Scalar>(x: &[T], plane: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let n = T::lit(plane as f64);
    let planes = x.len() / plane;
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(planes);
    for (src, dst) in x.chunks(plane).zip(out.chunks_mut(plane)) {
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::lit(eps)).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

pub fn instance_norm_backward<T: Scalar>(y: &[T], inv_std: &[T], dy: &[T], plane: usize) -> Vec<T> {
    let n = T::lit(plane as f64);
    let mut dx = vec![T::zero(); y.len()];
    for (p, ((yp, dyp), dxp)) in y
        .chunks(plane)
        .zip(dy.chunks(plane))
        .zip(dx.chunks_mut(plane))
        .enumerate()
    {
        let sum_dy = dyp.iter().copied().sum::<T>();
        let sum_dyy = dyp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>();
        let k = inv_std[p] / n;
        for ((d, &g), &yv) in dxp.iter_mut().zip(dyp).zip(yp) {
            *d = k * (n * g - sum_dy - yv * sum_dyy);
        }
    }
    dx
}
