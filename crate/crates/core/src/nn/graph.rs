//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every op appends a node holding its output and enough context to push a
//! gradient back to its inputs. [`Graph::backward`] walks the tape once in
//! reverse. Nodes that do not depend on a trainable leaf are never visited.

use super::conv::{self, reflect_index, ConvShape, Padding};
use super::deform::{self, DeformShape};
use super::elem::{gemm, Mat};
use super::{Elem, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, pad: Padding, depthwise: bool },
    Deform { x: Var, offsets: Var, mask: Option<Var>, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, w: Var, b: Var, xhat: Vec<T>, rstd: Vec<T> },
    L2NormRows { x: Var, norms: Vec<T> },
    SoftmaxRows(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    ScaleGroups { x: Var, s: Var },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Reshape(Var),
    PixelShuffle { x: Var, r: usize },
    PixelUnshuffle { x: Var, r: usize },
    ReflectPad(Var),
    Crop(Var),
    Charbonnier { pred: Var, target: Var, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Elem = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A graph whose leaves never require gradients.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf (a constant under [`Graph::inference`]).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- convolution family ------------------------------------------------

    /// Stride-1 "same" convolution. `w` is `[c_out, c_in, k, k]`, or
    /// `[c, 1, k, k]` for a depthwise convolution.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: Padding) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (co, ci, k, k2) = self.value(w).dims4();
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(k % 2, 1, "odd kernels only");
        let depthwise = ci == 1 && co == c && c > 1;
        assert!(depthwise || ci == c, "conv2d: input has {c} channels, weight expects {ci}");
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[co]);
        }
        let s = ConvShape { n, c_in: c, c_out: co, h, w: wd, k };
        let bias = b.map(|b| self.data(b));
        let out = if depthwise {
            conv::depthwise_forward(self.data(x), self.data(w), bias, &s, pad)
        } else {
            conv::conv2d_forward(self.data(x), self.data(w), bias, &s, pad)
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::from_vec(&[n, co, h, wd], out), Op::Conv { x, w, b, pad, depthwise }, &inputs)
    }

    /// Deformable sampling followed by tap mixing; see [`deform`].
    /// `w` is `[c_out, c_in, kernel, kernel]`.
    pub fn deform_conv(&mut self, x: Var, offsets: Var, mask: Option<Var>, w: Var, b: Option<Var>) -> Var {
        let s = self.deform_shape(x, offsets, mask, w);
        let out =
            deform::deform_forward(self.data(x), self.data(offsets), mask.map(|m| self.data(m)), self.data(w), b.map(|b| self.data(b)), &s);
        let mut inputs = vec![x, offsets, w];
        inputs.extend(mask);
        inputs.extend(b);
        self.push(Tensor::from_vec(&[s.n, s.c_out, s.h, s.w], out), Op::Deform { x, offsets, mask, w, b }, &inputs)
    }

    fn deform_shape(&self, x: Var, offsets: Var, mask: Option<Var>, w: Var) -> DeformShape {
        let (n, c, h, wd) = self.value(x).dims4();
        let (co, ci, k, k2) = self.value(w).dims4();
        assert!(ci == c && k == k2, "deform_conv weight shape mismatch");
        assert_eq!(self.shape(offsets), &[n, 2 * k * k, h, wd], "offset field shape");
        if let Some(m) = mask {
            assert_eq!(self.shape(m), &[n, k * k, h, wd], "modulation shape");
        }
        DeformShape { n, c_in: c, c_out: co, h, w: wd, kernel: k }
    }

    // ---- pointwise ---------------------------------------------------------

    fn map_unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|&a| f(a)).collect());
        self.push(out, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(self.shape(a), data);
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.map_unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a) = (T::of(GELU_C), T::of(GELU_A));
        let half = T::of(0.5);
        self.map_unary(x, Op::Gelu(x), |v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    // ---- normalization and attention primitives ----------------------------

    /// Per-pixel layer norm across channels with per-channel affine.
    pub fn channel_layer_norm(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        assert_eq!(self.shape(w), &[c]);
        assert_eq!(self.shape(b), &[c]);
        let hw = h * wd;
        let xd = self.data(x);
        let (wv, bv) = (self.data(w), self.data(b));
        let inv_c = T::of(1.0 / c as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); n * hw];
        let mut out = vec![T::zero(); xd.len()];
        let mut mean = vec![T::zero(); hw];
        let mut var = vec![T::zero(); hw];
        for ni in 0..n {
            let xn = &xd[ni * c * hw..(ni + 1) * c * hw];
            mean.fill(T::zero());
            var.fill(T::zero());
            for ci in 0..c {
                for (m, &v) in mean.iter_mut().zip(&xn[ci * hw..(ci + 1) * hw]) {
                    *m = *m + v;
                }
            }
            mean.iter_mut().for_each(|m| *m = *m * inv_c);
            for ci in 0..c {
                for ((s, &v), &m) in var.iter_mut().zip(&xn[ci * hw..(ci + 1) * hw]).zip(&mean) {
                    *s = *s + (v - m) * (v - m);
                }
            }
            let rs = &mut rstd[ni * hw..(ni + 1) * hw];
            for (r, &s) in rs.iter_mut().zip(&var) {
                *r = T::one() / (s * inv_c + eps).sqrt();
            }
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for p in 0..hw {
                    let xh = (xn[ci * hw + p] - mean[p]) * rs[p];
                    xhat[base + p] = xh;
                    out[base + p] = xh * wv[ci] + bv[ci];
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, h, wd], out);
        self.push(out, Op::LayerNorm { x, w, b, xhat, rstd }, &[x, w, b])
    }

    /// Normalize each row (last dimension) to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let len = *self.shape(x).last().expect("rank >= 1");
        let eps = T::of(L2_EPS);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(len) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let d = nrm.max(eps);
            out.extend(row.iter().map(|&v| v / d));
            norms.push(nrm);
        }
        let out = Tensor::from_vec(self.shape(x), out);
        self.push(out, Op::L2NormRows { x, norms }, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let len = *self.shape(x).last().expect("rank >= 1");
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(len) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            out.extend(row.iter().map(|&v| (v - mx).exp()));
            let z: T = out[start..].iter().copied().sum();
            out[start..].iter_mut().for_each(|v| *v = *v / z);
        }
        let out = Tensor::from_vec(self.shape(x), out);
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// Batched `a [B, m, k] x b [B, k, n]`, or `x b^T` with `b` as `[B, n, k]`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (bs, m, k) = dims3(self.shape(a));
        let (bs2, r, c) = dims3(self.shape(b));
        assert_eq!(bs, bs2, "matmul batch mismatch");
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        assert_eq!(k, kb, "matmul inner dimension mismatch");
        let mut out = vec![T::zero(); bs * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..bs {
            let am = Mat::new(&ad[i * m * k..(i + 1) * m * k], m, k);
            let bslice = &bd[i * k * n..(i + 1) * k * n];
            let bm = if trans_b { Mat::t(bslice, k, n) } else { Mat::new(bslice, k, n) };
            gemm(am, bm, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
        }
        self.push(Tensor::from_vec(&[bs, m, n], out), Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// Multiply group `g` of `x` (shape `[N, G, ...]`) by `s[g]`.
    pub fn scale_groups(&mut self, x: Var, s: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let groups = shape[1];
        assert_eq!(self.shape(s), &[groups], "scale_groups expects one scale per group");
        let inner: usize = shape[2..].iter().product();
        let sv = self.data(s);
        let out: Vec<T> = self
            .data(x)
            .chunks(inner)
            .enumerate()
            .flat_map(|(i, chunk)| {
                let f = sv[i % groups];
                chunk.iter().map(move |&v| v * f)
            })
            .collect();
        self.push(Tensor::from_vec(&shape, out), Op::ScaleGroups { x, s }, &[x, s])
    }

    // ---- layout --------------------------------------------------------------

    /// Concatenate rank-4 tensors along channels.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let hw = h * w;
        let mut total = 0;
        for &v in xs {
            let (n2, c, h2, w2) = self.value(v).dims4();
            assert!(n2 == n && h2 == h && w2 == w, "concat spatial/batch mismatch");
            total += c;
        }
        let mut out = Vec::with_capacity(n * total * hw);
        for ni in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.data(v)[ni * c * hw..(ni + 1) * c * hw]);
            }
        }
        self.push(Tensor::from_vec(&[n, total, h, w], out), Op::Concat(xs.to_vec()), xs)
    }

    /// Channels `start..start + len` of a rank-4 tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(start + len <= c, "channel slice out of range");
        let hw = h * w;
        let d = self.data(x);
        let mut out = Vec::with_capacity(n * len * hw);
        for ni in 0..n {
            out.extend_from_slice(&d[(ni * c + start) * hw..(ni * c + start + len) * hw]);
        }
        self.push(Tensor::from_vec(&[n, len, h, w], out), Op::Slice { x, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        self.push(out, Op::Reshape(x), &[x])
    }

    /// `[N, C*r*r, H, W] -> [N, C, H*r, W*r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(c % (r * r), 0, "pixel_shuffle channels must divide r^2");
        let mut out = Tensor::zeros(&[n, c / (r * r), h * r, w * r]);
        shuffle_copy(self.data(x), out.data_mut(), (n, c / (r * r), h, w), r);
        self.push(out, Op::PixelShuffle { x, r }, &[x])
    }

    /// `[N, C, H, W] -> [N, C*r*r, H/r, W/r]`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(h % r == 0 && w % r == 0, "pixel_unshuffle needs dims divisible by r");
        let mut out = Tensor::zeros(&[n, c * r * r, h / r, w / r]);
        unshuffle_into(self.data(x), out.data_mut(), (n, c, h / r, w / r), r);
        self.push(out, Op::PixelUnshuffle { x, r }, &[x])
    }

    /// Extend bottom/right borders by mirroring.
    pub fn reflect_pad(&mut self, x: Var, bottom: usize, right: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h + bottom, w + right);
        let d = self.data(x);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            for y in 0..ho {
                let sy = reflect_index(y as isize, h);
                for xx in 0..wo {
                    out[(plane * ho + y) * wo + xx] = d[(plane * h + sy) * w + reflect_index(xx as isize, w)];
                }
            }
        }
        self.push(Tensor::from_vec(&[n, c, ho, wo], out), Op::ReflectPad(x), &[x])
    }

    /// Keep the top-left `h x w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (n, c, hi, wi) = self.value(x).dims4();
        assert!(h <= hi && w <= wi, "crop larger than input");
        let d = self.data(x);
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in 0..n * c {
            for y in 0..h {
                let base = (plane * hi + y) * wi;
                out.extend_from_slice(&d[base..base + w]);
            }
        }
        self.push(Tensor::from_vec(&[n, c, h, w], out), Op::Crop(x), &[x])
    }

    // ---- losses --------------------------------------------------------------

    /// Mean of `sqrt((pred - target)^2 + eps^2)`, as a `[1]` tensor.
    pub fn charbonnier(&mut self, pred: Var, target: Var, eps: f64) -> Var {
        assert_eq!(self.shape(pred), self.shape(target), "charbonnier shape mismatch");
        let e2 = eps * eps;
        let n = self.value(pred).numel() as f64;
        let sum: f64 = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(&p, &t)| {
                let d = (p - t).f64();
                (d * d + e2).sqrt()
            })
            .sum();
        let out = Tensor::from_vec(&[1], vec![T::of(sum / n)]);
        self.push(out, Op::Charbonnier { pred, target, eps: T::of(eps) }, &[pred, target])
    }

    // ---- reverse pass --------------------------------------------------------

    /// Gradients of a scalar (`[1]`) node with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward() needs a scalar");
        self.backward_with(loss, Tensor::full(self.shape(loss), T::one()))
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(out), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, pad, depthwise } => {
                let (n, c, h, wd) = self.value(*x).dims4();
                let (co, _, k, _) = self.value(*w).dims4();
                let s = ConvShape { n, c_in: c, c_out: co, h, w: wd, k };
                let f = if *depthwise { conv::depthwise_backward } else { conv::conv2d_backward };
                let (dx, dw, db) = f(self.data(*x), self.data(*w), gd, &s, *pad, self.wants(*x));
                if let Some(dx) = dx {
                    acc(*x, Tensor::from_vec(self.shape(*x), dx));
                }
                acc(*w, Tensor::from_vec(self.shape(*w), dw));
                if let Some(b) = b {
                    acc(*b, Tensor::from_vec(&[co], db));
                }
            }
            Op::Deform { x, offsets, mask, w, b } => {
                let s = self.deform_shape(*x, *offsets, *mask, *w);
                let dg = deform::deform_backward(self.data(*x), self.data(*offsets), mask.map(|m| self.data(m)), self.data(*w), gd, &s);
                acc(*x, Tensor::from_vec(self.shape(*x), dg.input));
                acc(*offsets, Tensor::from_vec(self.shape(*offsets), dg.offsets));
                if let (Some(m), Some(dm)) = (mask, dg.mask) {
                    acc(*m, Tensor::from_vec(self.shape(*m), dm));
                }
                acc(*w, Tensor::from_vec(self.shape(*w), dg.weight));
                if let Some(b) = b {
                    acc(*b, Tensor::from_vec(&[s.c_out], dg.bias));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    acc(*a, Tensor::from_vec(g.shape(), zipmap(gd, bd, |g, y| g * y)));
                }
                if self.wants(*b) {
                    acc(*b, Tensor::from_vec(g.shape(), zipmap(gd, ad, |g, x| g * x)));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(*x, Tensor::from_vec(g.shape(), gd.iter().map(|&v| v * c).collect()));
            }
            Op::Gelu(x) => {
                let (c, a) = (T::of(GELU_C), T::of(GELU_A));
                let (half, one, three) = (T::of(0.5), T::one(), T::of(3.0));
                let dx = zipmap(gd, self.data(*x), |g, v| {
                    let t = (c * (v + a * v * v * v)).tanh();
                    let d = half * (one + t) + half * v * (one - t * t) * c * (one + three * a * v * v);
                    g * d
                });
                acc(*x, Tensor::from_vec(g.shape(), dx));
            }
            Op::Tanh(x) => {
                let dx = zipmap(gd, node.value.data(), |g, y| g * (T::one() - y * y));
                acc(*x, Tensor::from_vec(g.shape(), dx));
            }
            Op::Sigmoid(x) => {
                let dx = zipmap(gd, node.value.data(), |g, y| g * y * (T::one() - y));
                acc(*x, Tensor::from_vec(g.shape(), dx));
            }
            Op::LayerNorm { x, w, b, xhat, rstd } => {
                let (n, c, h, wd) = self.value(*x).dims4();
                let hw = h * wd;
                let wv = self.data(*w);
                let inv_c = T::of(1.0 / c as f64);
                let mut dw = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                let mut dx = vec![T::zero(); gd.len()];
                let mut m1 = vec![T::zero(); hw];
                let mut m2 = vec![T::zero(); hw];
                for ni in 0..n {
                    m1.fill(T::zero());
                    m2.fill(T::zero());
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for p in 0..hw {
                            let gv = gd[base + p];
                            let xh = xhat[base + p];
                            dw[ci] = dw[ci] + gv * xh;
                            db[ci] = db[ci] + gv;
                            let dxh = gv * wv[ci];
                            m1[p] = m1[p] + dxh;
                            m2[p] = m2[p] + dxh * xh;
                        }
                    }
                    let rs = &rstd[ni * hw..(ni + 1) * hw];
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for p in 0..hw {
                            let dxh = gd[base + p] * wv[ci];
                            dx[base + p] = rs[p] * (dxh - m1[p] * inv_c - xhat[base + p] * m2[p] * inv_c);
                        }
                    }
                }
                acc(*x, Tensor::from_vec(g.shape(), dx));
                acc(*w, Tensor::from_vec(&[c], dw));
                acc(*b, Tensor::from_vec(&[c], db));
            }
            Op::L2NormRows { x, norms } => {
                let len = *g.shape().last().unwrap();
                let eps = T::of(L2_EPS);
                let y = node.value.data();
                let mut dx = Vec::with_capacity(gd.len());
                for (r, &nrm) in norms.iter().enumerate() {
                    let (gr, yr) = (&gd[r * len..(r + 1) * len], &y[r * len..(r + 1) * len]);
                    if nrm > eps {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        dx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| (gv - yv * dot) / nrm));
                    } else {
                        dx.extend(gr.iter().map(|&gv| gv / eps));
                    }
                }
                acc(*x, Tensor::from_vec(g.shape(), dx));
            }
            Op::SoftmaxRows(x) => {
                let len = *g.shape().last().unwrap();
                let y = node.value.data();
                let mut dx = Vec::with_capacity(gd.len());
                for (gr, yr) in gd.chunks(len).zip(y.chunks(len)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                acc(*x, Tensor::from_vec(g.shape(), dx));
            }
            Op::MatMul { a, b, trans_b } => {
                let (bs, m, k) = dims3(self.shape(*a));
                let n = g.shape()[2];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let mut da = vec![T::zero(); ad.len()];
                    for i in 0..bs {
                        let gm = Mat::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                        let bs_ = &bd[i * k * n..(i + 1) * k * n];
                        let bt = if *trans_b { Mat::new(bs_, n, k) } else { Mat::t(bs_, n, k) };
                        gemm(gm, bt, T::zero(), &mut da[i * m * k..(i + 1) * m * k]);
                    }
                    acc(*a, Tensor::from_vec(self.shape(*a), da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); bd.len()];
                    for i in 0..bs {
                        let gs = &gd[i * m * n..(i + 1) * m * n];
                        let as_ = &ad[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(Mat::t(gs, n, m), Mat::new(as_, m, k), T::zero(), out);
                        } else {
                            gemm(Mat::t(as_, k, m), Mat::new(gs, m, n), T::zero(), out);
                        }
                    }
                    acc(*b, Tensor::from_vec(self.shape(*b), db));
                }
            }
            Op::ScaleGroups { x, s } => {
                let groups = self.shape(*s)[0];
                let inner: usize = g.shape()[2..].iter().product();
                let (xd, sv) = (self.data(*x), self.data(*s));
                let mut ds = vec![T::zero(); groups];
                let mut dx = Vec::with_capacity(gd.len());
                for (i, (gc, xc)) in gd.chunks(inner).zip(xd.chunks(inner)).enumerate() {
                    let gi = i % groups;
                    ds[gi] = ds[gi] + gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>();
                    dx.extend(gc.iter().map(|&v| v * sv[gi]));
                }
                acc(*x, Tensor::from_vec(g.shape(), dx));
                acc(*s, Tensor::from_vec(&[groups], ds));
            }
            Op::Concat(xs) => {
                let (n, total, h, w) = g.dims4();
                let hw = h * w;
                let mut start = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.wants(v) {
                        let mut part = Vec::with_capacity(n * c * hw);
                        for ni in 0..n {
                            let base = (ni * total + start) * hw;
                            part.extend_from_slice(&gd[base..base + c * hw]);
                        }
                        acc(v, Tensor::from_vec(self.shape(v), part));
                    }
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let len = g.shape()[1];
                let hw = h * w;
                let mut dx = vec![T::zero(); n * c * hw];
                for ni in 0..n {
                    let dst = (ni * c + start) * hw;
                    dx[dst..dst + len * hw].copy_from_slice(&gd[ni * len * hw..(ni + 1) * len * hw]);
                }
                acc(*x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::Reshape(x) => acc(*x, g.clone().reshaped(self.shape(*x))),
            Op::PixelShuffle { x, r } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let mut dx = vec![T::zero(); gd.len()];
                unshuffle_into(gd, &mut dx, (n, c / (r * r), h, w), *r);
                acc(*x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::PixelUnshuffle { x, r } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let mut dx = vec![T::zero(); gd.len()];
                shuffle_copy(gd, &mut dx, (n, c, h / r, w / r), *r);
                acc(*x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::ReflectPad(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (_, _, ho, wo) = g.dims4();
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for y in 0..ho {
                        let sy = reflect_index(y as isize, h);
                        for xx in 0..wo {
                            let i = (plane * h + sy) * w + reflect_index(xx as isize, w);
                            dx[i] = dx[i] + gd[(plane * ho + y) * wo + xx];
                        }
                    }
                }
                acc(*x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::Crop(x) => {
                let (n, c, hi, wi) = self.value(*x).dims4();
                let (_, _, h, w) = g.dims4();
                let mut dx = vec![T::zero(); n * c * hi * wi];
                for plane in 0..n * c {
                    for y in 0..h {
                        let dst = (plane * hi + y) * wi;
                        dx[dst..dst + w].copy_from_slice(&gd[(plane * h + y) * w..(plane * h + y + 1) * w]);
                    }
                }
                acc(*x, Tensor::from_vec(&[n, c, hi, wi], dx));
            }
            Op::Charbonnier { pred, target, eps } => {
                let scale = gd[0] / T::of(self.value(*pred).numel() as f64);
                let e2 = *eps * *eps;
                let d: Vec<T> = zipmap(self.data(*pred), self.data(*target), |p, t| {
                    let d = p - t;
                    scale * d / (d * d + e2).sqrt()
                });
                if self.wants(*target) {
                    let neg = d.iter().map(|&v| -v).collect();
                    acc(*target, Tensor::from_vec(self.shape(*target), neg));
                }
                acc(*pred, Tensor::from_vec(self.shape(*pred), d));
            }
        }
    }
}

/// Result of a reverse pass; indexed by the leaves' [`Var`]s.
pub struct Gradients<T: Elem = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Elem> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [b, m, n] => (*b, *m, *n),
        _ => panic!("expected rank-3 tensor, got {shape:?}"),
    }
}

fn zipmap<T: Elem>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Pixel shuffle of `src` (`[n, c*r*r, h, w]`) into `dst` (`[n, c, h*r, w*r]`).
fn shuffle_copy<T: Elem>(src: &[T], dst: &mut [T], (n, c, h, w): (usize, usize, usize, usize), r: usize) {
    let (ho, wo) = (h * r, w * r);
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let sc = ci * r * r + i * r + j;
                    let sbase = ((ni * c * r * r) + sc) * h * w;
                    let dbase = (ni * c + ci) * ho * wo;
                    for y in 0..h {
                        for x in 0..w {
                            dst[dbase + (y * r + i) * wo + x * r + j] = src[sbase + y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// Inverse of [`shuffle_copy`]: `src` is `[n, c, h*r, w*r]`, `dst` is
/// `[n, c*r*r, h, w]`.
fn unshuffle_into<T: Elem>(src: &[T], dst: &mut [T], (n, c, h, w): (usize, usize, usize, usize), r: usize) {
    let (hi, wi) = (h * r, w * r);
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let dc = ci * r * r + i * r + j;
                    let dbase = ((ni * c * r * r) + dc) * h * w;
                    let sbase = (ni * c + ci) * hi * wi;
                    for y in 0..h {
                        for x in 0..w {
                            dst[dbase + y * w + x] = src[sbase + (y * r + i) * wi + x * r + j];
                        }
                    }
                }
            }
        }
    }
}
