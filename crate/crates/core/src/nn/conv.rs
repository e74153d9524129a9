//! Stride-1 "same" convolutions over `[N, C, H, W]` tensors.
//!
//! Dense convolutions go through im2col + GEMM; depthwise ones run directly
//! on a padded copy of each plane. Both recompute the padded input in the
//! backward pass instead of caching the column buffer.

use super::elem::{gemm, Mat};
use super::Elem;

/// Border handling for spatial operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Mirror without repeating the edge sample (`-1 -> 1`).
    #[default]
    Reflect,
    Zero,
}

/// Mirror an arbitrary integer coordinate into `0..n`.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

fn pad_plane<T: Elem>(src: &[T], h: usize, w: usize, p: usize, mode: Padding, dst: &mut [T]) {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    debug_assert_eq!(dst.len(), hp * wp);
    for yp in 0..hp {
        let row = &mut dst[yp * wp..(yp + 1) * wp];
        let sy = yp as isize - p as isize;
        let sy = match mode {
            Padding::Reflect => reflect_index(sy, h),
            Padding::Zero if sy < 0 || sy >= h as isize => {
                row.fill(T::zero());
                continue;
            }
            Padding::Zero => sy as usize,
        };
        let srow = &src[sy * w..(sy + 1) * w];
        row[p..p + w].copy_from_slice(srow);
        for xp in (0..p).chain(p + w..wp) {
            let sx = xp as isize - p as isize;
            row[xp] = match mode {
                Padding::Reflect => srow[reflect_index(sx, w)],
                Padding::Zero => T::zero(),
            };
        }
    }
}

/// Adjoint of [`pad_plane`]: accumulate a padded gradient into `dst`.
fn fold_plane<T: Elem>(dpad: &[T], h: usize, w: usize, p: usize, mode: Padding, dst: &mut [T]) {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    for yp in 0..hp {
        let sy = yp as isize - p as isize;
        let sy = match mode {
            Padding::Reflect => reflect_index(sy, h),
            Padding::Zero if sy < 0 || sy >= h as isize => continue,
            Padding::Zero => sy as usize,
        };
        let row = &dpad[yp * wp..(yp + 1) * wp];
        let drow = &mut dst[sy * w..(sy + 1) * w];
        for (d, &g) in drow.iter_mut().zip(&row[p..p + w]) {
            *d = *d + g;
        }
        if mode == Padding::Reflect {
            for xp in (0..p).chain(p + w..wp) {
                let sx = reflect_index(xp as isize - p as isize, w);
                drow[sx] = drow[sx] + row[xp];
            }
        }
    }
}

/// Geometry shared by the conv kernels.
#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvShape {
    fn pad(&self) -> usize {
        self.k / 2
    }
}

fn im2col<T: Elem>(xp: &[T], s: &ConvShape, cols: &mut [T]) {
    let (p, k) = (s.pad(), s.k);
    let (hp, wp) = (s.h + 2 * p, s.w + 2 * p);
    let hw = s.h * s.w;
    for c in 0..s.c_in {
        let plane = &xp[c * hp * wp..(c + 1) * hp * wp];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..s.h {
                    let src = &plane[(y + ky) * wp + kx..(y + ky) * wp + kx + s.w];
                    dst[y * s.w..(y + 1) * s.w].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im<T: Elem>(cols: &[T], s: &ConvShape, dxp: &mut [T]) {
    let (p, k) = (s.pad(), s.k);
    let (hp, wp) = (s.h + 2 * p, s.w + 2 * p);
    let hw = s.h * s.w;
    for c in 0..s.c_in {
        let plane = &mut dxp[c * hp * wp..(c + 1) * hp * wp];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..s.h {
                    let dst = &mut plane[(y + ky) * wp + kx..(y + ky) * wp + kx + s.w];
                    for (d, &g) in dst.iter_mut().zip(&src[y * s.w..(y + 1) * s.w]) {
                        *d = *d + g;
                    }
                }
            }
        }
    }
}

fn pad_image<T: Elem>(x: &[T], c: usize, h: usize, w: usize, p: usize, mode: Padding) -> Vec<T> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); c * hp * wp];
    for ci in 0..c {
        pad_plane(&x[ci * h * w..(ci + 1) * h * w], h, w, p, mode, &mut out[ci * hp * wp..(ci + 1) * hp * wp]);
    }
    out
}

/// Dense convolution. `weight` is `[c_out, c_in, k, k]`.
pub fn conv2d_forward<T: Elem>(x: &[T], weight: &[T], bias: Option<&[T]>, s: &ConvShape, mode: Padding) -> Vec<T> {
    let hw = s.h * s.w;
    let kk = s.k * s.k;
    let mut out = vec![T::zero(); s.n * s.c_out * hw];
    let mut cols = if s.k > 1 { vec![T::zero(); s.c_in * kk * hw] } else { Vec::new() };
    let wmat = Mat::new(weight, s.c_out, s.c_in * kk);
    for n in 0..s.n {
        let xn = &x[n * s.c_in * hw..(n + 1) * s.c_in * hw];
        let on = &mut out[n * s.c_out * hw..(n + 1) * s.c_out * hw];
        if s.k == 1 {
            gemm(wmat, Mat::new(xn, s.c_in, hw), T::zero(), on);
        } else {
            let xp = pad_image(xn, s.c_in, s.h, s.w, s.pad(), mode);
            im2col(&xp, s, &mut cols);
            gemm(wmat, Mat::new(&cols, s.c_in * kk, hw), T::zero(), on);
        }
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut on[co * hw..(co + 1) * hw] {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]: `(dx, dweight, dbias)`. `dx` is skipped
/// when `want_dx` is false.
pub fn conv2d_backward<T: Elem>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    s: &ConvShape,
    mode: Padding,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let hw = s.h * s.w;
    let kk = s.k * s.k;
    let p = s.pad();
    let (hp, wp) = (s.h + 2 * p, s.w + 2 * p);
    let mut dx = want_dx.then(|| vec![T::zero(); s.n * s.c_in * hw]);
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); s.c_out];
    let mut cols = if s.k > 1 { vec![T::zero(); s.c_in * kk * hw] } else { Vec::new() };
    let mut dcols = if s.k > 1 && want_dx { vec![T::zero(); s.c_in * kk * hw] } else { Vec::new() };
    for n in 0..s.n {
        let xn = &x[n * s.c_in * hw..(n + 1) * s.c_in * hw];
        let dn = &dout[n * s.c_out * hw..(n + 1) * s.c_out * hw];
        for (co, acc) in db.iter_mut().enumerate() {
            *acc = *acc + dn[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        let dmat = Mat::new(dn, s.c_out, hw);
        if s.k == 1 {
            gemm(dmat, Mat::t(xn, hw, s.c_in), T::one(), &mut dw);
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * s.c_in * hw..(n + 1) * s.c_in * hw];
                gemm(Mat::t(weight, s.c_in, s.c_out), dmat, T::zero(), dxn);
            }
            continue;
        }
        let xp = pad_image(xn, s.c_in, s.h, s.w, p, mode);
        im2col(&xp, s, &mut cols);
        gemm(dmat, Mat::t(&cols, hw, s.c_in * kk), T::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            gemm(Mat::t(weight, s.c_in * kk, s.c_out), dmat, T::zero(), &mut dcols);
            let mut dxp = vec![T::zero(); s.c_in * hp * wp];
            col2im(&dcols, s, &mut dxp);
            let dxn = &mut dx[n * s.c_in * hw..(n + 1) * s.c_in * hw];
            for c in 0..s.c_in {
                fold_plane(&dxp[c * hp * wp..(c + 1) * hp * wp], s.h, s.w, p, mode, &mut dxn[c * hw..(c + 1) * hw]);
            }
        }
    }
    (dx, dw, db)
}

/// Depthwise convolution (`groups == channels`). `weight` is `[c, 1, k, k]`.
pub fn depthwise_forward<T: Elem>(x: &[T], weight: &[T], bias: Option<&[T]>, s: &ConvShape, mode: Padding) -> Vec<T> {
    debug_assert_eq!(s.c_in, s.c_out);
    let (k, p) = (s.k, s.pad());
    let (hp, wp) = (s.h + 2 * p, s.w + 2 * p);
    let hw = s.h * s.w;
    let mut out = vec![T::zero(); s.n * s.c_in * hw];
    let mut plane = vec![T::zero(); hp * wp];
    for n in 0..s.n {
        for c in 0..s.c_in {
            let base = (n * s.c_in + c) * hw;
            pad_plane(&x[base..base + hw], s.h, s.w, p, mode, &mut plane);
            let wc = &weight[c * k * k..(c + 1) * k * k];
            let oc = &mut out[base..base + hw];
            if let Some(b) = bias {
                oc.fill(b[c]);
            }
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wc[ky * k + kx];
                    for y in 0..s.h {
                        let src = &plane[(y + ky) * wp + kx..(y + ky) * wp + kx + s.w];
                        for (o, &v) in oc[y * s.w..(y + 1) * s.w].iter_mut().zip(src) {
                            *o = *o + wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward<T: Elem>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    s: &ConvShape,
    mode: Padding,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (k, p) = (s.k, s.pad());
    let (hp, wp) = (s.h + 2 * p, s.w + 2 * p);
    let hw = s.h * s.w;
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); s.c_in];
    let mut plane = vec![T::zero(); hp * wp];
    let mut dplane = vec![T::zero(); hp * wp];
    for n in 0..s.n {
        for c in 0..s.c_in {
            let base = (n * s.c_in + c) * hw;
            let dc = &dout[base..base + hw];
            db[c] = db[c] + dc.iter().copied().sum::<T>();
            pad_plane(&x[base..base + hw], s.h, s.w, p, mode, &mut plane);
            dplane.fill(T::zero());
            let wc = &weight[c * k * k..(c + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wc[ky * k + kx];
                    let mut acc = T::zero();
                    for y in 0..s.h {
                        let off = (y + ky) * wp + kx;
                        let g = &dc[y * s.w..(y + 1) * s.w];
                        acc = acc + plane[off..off + s.w].iter().zip(g).map(|(&a, &b)| a * b).sum::<T>();
                        if want_dx {
                            for (d, &gv) in dplane[off..off + s.w].iter_mut().zip(g) {
                                *d = *d + wv * gv;
                            }
                        }
                    }
                    dw[c * k * k + ky * k + kx] = dw[c * k * k + ky * k + kx] + acc;
                }
            }
            if let Some(dx) = dx.as_mut() {
                fold_plane(&dplane, s.h, s.w, p, mode, &mut dx[base..base + hw]);
            }
        }
    }
    (dx, dw, db)
}
