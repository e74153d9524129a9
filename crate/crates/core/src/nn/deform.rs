//! Modulated deformable sampling as an explicit bilinear gather.
//!
//! For output position `p` and tap `k` with base grid offset `g_k`, the input
//! is read at `p + g_k + offset(p, k)` by bilinear interpolation over the
//! reflection-extended input, scaled by `modulation(p, k)`, and the taps are
//! mixed by a `[c_out, c_in, kh, kw]` weight exactly like a convolution.
//!
//! Offsets are laid out `[N, 2K, H, W]` with `(dy, dx)` of tap `k` at channels
//! `2k` and `2k + 1`; modulation is `[N, K, H, W]`.

use super::conv::reflect_index;
use super::elem::{gemm, Mat};
use super::Elem;

#[derive(Debug, Clone, Copy)]
pub struct DeformShape {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    /// Square tap pattern side; `taps = kernel * kernel`.
    pub kernel: usize,
}

impl DeformShape {
    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }
}

#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    idx: [usize; 4],
    ay: T,
    ax: T,
}

impl<T: Elem> Tap<T> {
    #[inline]
    fn at(y: T, x: T, h: usize, w: usize) -> Self {
        let (fy, fx) = (y.floor(), x.floor());
        let (ay, ax) = (y - fy, x - fx);
        let (y0, x0) = (fy.to_isize().unwrap_or(0), fx.to_isize().unwrap_or(0));
        let (r0, r1) = (reflect_index(y0, h), reflect_index(y0 + 1, h));
        let (c0, c1) = (reflect_index(x0, w), reflect_index(x0 + 1, w));
        Tap { idx: [r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1], ay, ax }
    }

    #[inline]
    fn weights(&self) -> [T; 4] {
        let one = T::one();
        [(one - self.ay) * (one - self.ax), (one - self.ay) * self.ax, self.ay * (one - self.ax), self.ay * self.ax]
    }
}

struct Sampler<'a, T> {
    offsets: &'a [T],
    s: DeformShape,
}

impl<'a, T: Elem> Sampler<'a, T> {
    /// Sampling tap for image `n`, tap `k`, flat position `p`.
    #[inline]
    fn tap(&self, n: usize, k: usize, p: usize) -> Tap<T> {
        let DeformShape { h, w, kernel, .. } = self.s;
        let hw = h * w;
        let base = n * 2 * self.s.taps() * hw;
        let dy = self.offsets[base + 2 * k * hw + p];
        let dx = self.offsets[base + (2 * k + 1) * hw + p];
        let half = (kernel / 2) as isize;
        let gy = (k / kernel) as isize - half;
        let gx = (k % kernel) as isize - half;
        let y = T::of(((p / w) as isize + gy) as f64) + dy;
        let x = T::of(((p % w) as isize + gx) as f64) + dx;
        Tap::at(y, x, h, w)
    }
}

fn build_columns<T: Elem>(xn: &[T], sampler: &Sampler<'_, T>, mask: Option<&[T]>, n: usize, cols: &mut [T]) {
    let s = sampler.s;
    let (hw, taps) = (s.h * s.w, s.taps());
    for k in 0..taps {
        for p in 0..hw {
            let tap = sampler.tap(n, k, p);
            let wts = tap.weights();
            let m = mask.map_or(T::one(), |m| m[(n * taps + k) * hw + p]);
            for c in 0..s.c_in {
                let plane = &xn[c * hw..(c + 1) * hw];
                let v = wts[0] * plane[tap.idx[0]] + wts[1] * plane[tap.idx[1]] + wts[2] * plane[tap.idx[2]] + wts[3] * plane[tap.idx[3]];
                cols[(c * taps + k) * hw + p] = m * v;
            }
        }
    }
}

pub fn deform_forward<T: Elem>(x: &[T], offsets: &[T], mask: Option<&[T]>, weight: &[T], bias: Option<&[T]>, s: &DeformShape) -> Vec<T> {
    let (hw, taps) = (s.h * s.w, s.taps());
    let sampler = Sampler { offsets, s: *s };
    let mut out = vec![T::zero(); s.n * s.c_out * hw];
    let mut cols = vec![T::zero(); s.c_in * taps * hw];
    for n in 0..s.n {
        build_columns(&x[n * s.c_in * hw..(n + 1) * s.c_in * hw], &sampler, mask, n, &mut cols);
        let on = &mut out[n * s.c_out * hw..(n + 1) * s.c_out * hw];
        gemm(Mat::new(weight, s.c_out, s.c_in * taps), Mat::new(&cols, s.c_in * taps, hw), T::zero(), on);
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

#[derive(Debug, Clone)]
pub struct DeformGrads<T> {
    pub input: Vec<T>,
    pub offsets: Vec<T>,
    pub mask: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn deform_backward<T: Elem>(x: &[T], offsets: &[T], mask: Option<&[T]>, weight: &[T], dout: &[T], s: &DeformShape) -> DeformGrads<T> {
    let (hw, taps) = (s.h * s.w, s.taps());
    let sampler = Sampler { offsets, s: *s };
    let mut g = DeformGrads {
        input: vec![T::zero(); x.len()],
        offsets: vec![T::zero(); offsets.len()],
        mask: mask.map(|m| vec![T::zero(); m.len()]),
        weight: vec![T::zero(); weight.len()],
        bias: vec![T::zero(); s.c_out],
    };
    let mut cols = vec![T::zero(); s.c_in * taps * hw];
    let mut dcols = vec![T::zero(); s.c_in * taps * hw];
    let one = T::one();
    for n in 0..s.n {
        let xn = &x[n * s.c_in * hw..(n + 1) * s.c_in * hw];
        let dn = &dout[n * s.c_out * hw..(n + 1) * s.c_out * hw];
        for (co, acc) in g.bias.iter_mut().enumerate() {
            *acc = *acc + dn[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        build_columns(xn, &sampler, mask, n, &mut cols);
        let dmat = Mat::new(dn, s.c_out, hw);
        gemm(dmat, Mat::t(&cols, hw, s.c_in * taps), one, &mut g.weight);
        gemm(Mat::t(weight, s.c_in * taps, s.c_out), dmat, T::zero(), &mut dcols);

        let dxn = &mut g.input[n * s.c_in * hw..(n + 1) * s.c_in * hw];
        for k in 0..taps {
            for p in 0..hw {
                let tap = sampler.tap(n, k, p);
                let wts = tap.weights();
                let (ay, ax) = (tap.ay, tap.ax);
                let m = mask.map_or(one, |m| m[(n * taps + k) * hw + p]);
                let (mut g_dy, mut g_dx, mut g_m) = (T::zero(), T::zero(), T::zero());
                for c in 0..s.c_in {
                    let dc = dcols[(c * taps + k) * hw + p];
                    let plane = &xn[c * hw..(c + 1) * hw];
                    let v = [plane[tap.idx[0]], plane[tap.idx[1]], plane[tap.idx[2]], plane[tap.idx[3]]];
                    let sample = wts[0] * v[0] + wts[1] * v[1] + wts[2] * v[2] + wts[3] * v[3];
                    g_m = g_m + dc * sample;
                    let ds = dc * m;
                    let dplane = &mut dxn[c * hw..(c + 1) * hw];
                    for (i, &wt) in wts.iter().enumerate() {
                        dplane[tap.idx[i]] = dplane[tap.idx[i]] + ds * wt;
                    }
                    g_dy = g_dy + ds * ((one - ax) * (v[2] - v[0]) + ax * (v[3] - v[1]));
                    g_dx = g_dx + ds * ((one - ay) * (v[1] - v[0]) + ay * (v[3] - v[2]));
                }
                let base = n * 2 * taps * hw;
                g.offsets[base + 2 * k * hw + p] = g.offsets[base + 2 * k * hw + p] + g_dy;
                g.offsets[base + (2 * k + 1) * hw + p] = g.offsets[base + (2 * k + 1) * hw + p] + g_dx;
                if let Some(dm) = g.mask.as_mut() {
                    let i = (n * taps + k) * hw + p;
                    dm[i] = dm[i] + g_m;
                }
            }
        }
    }
    g
}
