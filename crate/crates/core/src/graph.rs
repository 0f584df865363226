//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every backward rule is written in terms of graph operations, so the
//! gradients returned by [`grad`] are themselves differentiable. That is what
//! lets the meta-objective differentiate through an inner gradient step when
//! second-order updates are enabled.
//!
//! Images flowing through the graph use row-major `[height, width, channels]`
//! layout. Shape violations inside the graph are programming errors and panic;
//! public entry points validate their inputs before building graphs.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Dense row-major tensor.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("len", &self.data.len()).finish()
    }
}

impl Tensor {
    /// Panics when `data.len()` disagrees with the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data length does not match shape {shape:?}");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(Vec::new(), vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self::new(self.shape.clone(), self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect())
    }

    fn rows_cols(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }
}

/// `W x` for a row-major `[m, n]` matrix.
pub fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (m, n) = w.rows_cols();
    assert_eq!(x.len(), n, "matvec: matrix has {n} columns, vector has {}", x.len());
    matvec_rows(&w.data[..m * n], x)
}

/// `W x` for a row-major matrix with `x.len()` columns, stored at any
/// precision that widens losslessly to `f64`.
pub(crate) fn matvec_rows<W: Copy + Into<f64>>(w: &[W], x: &[f64]) -> Vec<f64> {
    w.chunks_exact(x.len()).map(|row| dot(row, x)).collect()
}

/// Inner product with eight independent partial sums, which lets the
/// compiler keep several multiply-adds in flight. The AVX path runs the same
/// lane layout and no fused multiply-add, so both paths agree bitwise.
pub fn dot<W: Copy + Into<f64>>(a: &[W], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the CPU supports AVX.
        return unsafe { dot_avx(a, b) };
    }
    dot_lanes(a, b)
}

#[inline(always)]
fn dot_lanes<W: Copy + Into<f64>>(a: &[W], b: &[f64]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(&x, y)| x.into() * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i].into() * y[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn dot_avx<W: Copy + Into<f64>>(a: &[W], b: &[f64]) -> f64 {
    dot_lanes(a, b)
}

/// `out += coef * row`, elementwise.
fn axpy<W: Copy + Into<f64>>(out: &mut [f64], coef: f64, row: &[W]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the CPU supports AVX.
        return unsafe { axpy_avx(out, coef, row) };
    }
    axpy_plain(out, coef, row)
}

#[inline(always)]
fn axpy_plain<W: Copy + Into<f64>>(out: &mut [f64], coef: f64, row: &[W]) {
    for (o, &a) in out.iter_mut().zip(row) {
        *o += coef * a.into();
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn axpy_avx<W: Copy + Into<f64>>(out: &mut [f64], coef: f64, row: &[W]) {
    axpy_plain(out, coef, row)
}

/// `Wᵀ u` for a row-major `[m, n]` matrix.
pub fn matvec_t(w: &Tensor, u: &[f64]) -> Vec<f64> {
    let (m, n) = w.rows_cols();
    assert_eq!(u.len(), m, "matvec_t: matrix has {m} rows, vector has {}", u.len());
    matvec_t_rows(&w.data[..m * n], n, u)
}

/// `Wᵀ u` for a row-major matrix with `n` columns.
pub(crate) fn matvec_t_rows<W: Copy + Into<f64>>(w: &[W], n: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (row, &coef) in w.chunks_exact(n).zip(u) {
        if coef == 0.0 {
            continue;
        }
        axpy(&mut out, coef, row);
    }
    out
}

/// A fixed 2-D convolution over `[h, w, in]` inputs without bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    weight: Vec<f64>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(weight: Vec<f64>, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        assert_eq!(weight.len(), out_channels * in_channels * kernel * kernel);
        assert!(stride >= 1 && kernel >= 1);
        Self { weight, in_channels, out_channels, kernel, stride, padding }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (span(h), span(w))
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx]
    }

    /// Visits every (output index, input index, weight) triple touched by the
    /// convolution. Forward and adjoint share it so they stay exact adjoints.
    fn for_each_tap(&self, h: usize, w: usize, mut f: impl FnMut(usize, usize, f64)) {
        let (ho, wo) = self.output_size(h, w);
        let (cin, cout, k) = (self.in_channels, self.out_channels, self.kernel);
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let in_base = (iy as usize * w + ix as usize) * cin;
                        let out_base = (oy * wo + ox) * cout;
                        for o in 0..cout {
                            for i in 0..cin {
                                f(out_base + o, in_base + i, self.w(o, i, ky, kx));
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (h, w) = image_hw(x, self.in_channels);
        let (ho, wo) = self.output_size(h, w);
        let mut out = vec![0.0; ho * wo * self.out_channels];
        self.for_each_tap(h, w, |o, i, k| out[o] += k * x.data[i]);
        Tensor::new(vec![ho, wo, self.out_channels], out)
    }

    pub fn adjoint(&self, g: &Tensor, h: usize, w: usize) -> Tensor {
        let (ho, wo) = self.output_size(h, w);
        assert_eq!(g.shape(), [ho, wo, self.out_channels]);
        let mut out = vec![0.0; h * w * self.in_channels];
        self.for_each_tap(h, w, |o, i, k| out[i] += k * g.data[o]);
        Tensor::new(vec![h, w, self.in_channels], out)
    }
}

fn image_hw(x: &Tensor, channels: usize) -> (usize, usize) {
    assert!(x.shape.len() == 3 && x.shape[2] == channels, "expected [h, w, {channels}] image tensor, got {:?}", x.shape);
    (x.shape[0], x.shape[1])
}

pub(crate) fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(ho * wo * c);
    for y in 0..ho {
        for xx in 0..wo {
            let base = ((y / factor) * w + xx / factor) * c;
            out.extend_from_slice(&x.data[base..base + c]);
        }
    }
    Tensor::new(vec![ho, wo, c], out)
}

pub(crate) fn sum_pool(x: &Tensor, factor: usize) -> Tensor {
    let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
    assert!(h % factor == 0 && w % factor == 0, "sum_pool: {h}x{w} not divisible by {factor}");
    let (ho, wo) = (h / factor, w / factor);
    let mut out = vec![0.0; ho * wo * c];
    for y in 0..h {
        for xx in 0..w {
            let src = (y * w + xx) * c;
            let dst = ((y / factor) * wo + xx / factor) * c;
            for ch in 0..c {
                out[dst + ch] += x.data[src + ch];
            }
        }
    }
    Tensor::new(vec![ho, wo, c], out)
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Sqrt(Var),
    Recip(Var),
    Sum(Var),
    Broadcast(Var),
    Reshape(Var),
    MatVec(Var, Var),
    MatTVec(Var, Var),
    Outer(Var, Var),
    ConstMatVec(Arc<Tensor>, Var),
    ConstMatTVec(Arc<Tensor>, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Embed(Var, usize),
    Upsample(Var, usize),
    SumPool(Var, usize),
    Conv(Arc<Conv2d>, Var),
    ConvAdjoint(Arc<Conv2d>, Var),
}

struct Node {
    id: u64,
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// A node in the computation graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("shape", &self.0.value.shape).field("requires_grad", &self.0.requires_grad).finish()
    }
}

impl Var {
    fn from_op(value: Tensor, op: Op) -> Self {
        let requires_grad = op.parents().iter().any(|p| p.0.requires_grad);
        Var(Rc::new(Node { id: NEXT_ID.fetch_add(1, Ordering::Relaxed), value, op, requires_grad }))
    }

    fn leaf(value: Tensor, requires_grad: bool) -> Self {
        Var(Rc::new(Node { id: NEXT_ID.fetch_add(1, Ordering::Relaxed), value, op: Op::Leaf, requires_grad }))
    }

    /// A leaf that gradients are taken with respect to.
    pub fn param(value: Tensor) -> Self {
        Self::leaf(value, true)
    }

    pub fn constant(value: Tensor) -> Self {
        Self::leaf(value, false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(Tensor::scalar(value))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.value.shape
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn add(&self, other: &Var) -> Var {
        let v = self.value().zip(other.value(), |a, b| a + b);
        Var::from_op(v, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = self.value().zip(other.value(), |a, b| a - b);
        Var::from_op(v, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = self.value().zip(other.value(), |a, b| a * b);
        Var::from_op(v, Op::Mul(self.clone(), other.clone()))
    }

    pub fn neg(&self) -> Var {
        Var::from_op(self.value().map(|a| -a), Op::Neg(self.clone()))
    }

    pub fn scale(&self, c: f64) -> Var {
        Var::from_op(self.value().map(|a| a * c), Op::Scale(self.clone(), c))
    }

    /// Adds a constant to every element.
    pub fn offset(&self, c: f64) -> Var {
        Var::from_op(self.value().map(|a| a + c), Op::Offset(self.clone()))
    }

    pub fn tanh(&self) -> Var {
        Var::from_op(self.value().map(f64::tanh), Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Var {
        Var::from_op(self.value().map(sigmoid), Op::Sigmoid(self.clone()))
    }

    pub fn exp(&self) -> Var {
        Var::from_op(self.value().map(f64::exp), Op::Exp(self.clone()))
    }

    pub fn sqrt(&self) -> Var {
        Var::from_op(self.value().map(f64::sqrt), Op::Sqrt(self.clone()))
    }

    pub fn recip(&self) -> Var {
        Var::from_op(self.value().map(|a| 1.0 / a), Op::Recip(self.clone()))
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Var {
        let s = self.value().data.iter().sum();
        Var::from_op(Tensor::scalar(s), Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Var {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Repeats a single-element tensor to `shape`.
    pub fn broadcast(&self, shape: &[usize]) -> Var {
        let v = Tensor::filled(shape.to_vec(), self.item());
        Var::from_op(v, Op::Broadcast(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = self.value().clone().reshaped(shape.to_vec());
        Var::from_op(v, Op::Reshape(self.clone()))
    }

    pub fn dot(&self, other: &Var) -> Var {
        self.mul(other).sum()
    }

    /// Euclidean norm as a scalar.
    pub fn norm(&self) -> Var {
        self.square().sum().sqrt()
    }

    /// Matrix `self` (`[m, n]`) times vector `x` (`[n]`).
    pub fn matvec(&self, x: &Var) -> Var {
        let v = Tensor::vector(matvec(self.value(), x.value().data()));
        Var::from_op(v, Op::MatVec(self.clone(), x.clone()))
    }

    /// Transposed matrix `self`ᵀ times vector `u` (`[m]`).
    pub fn matvec_t(&self, u: &Var) -> Var {
        let v = Tensor::vector(matvec_t(self.value(), u.value().data()));
        Var::from_op(v, Op::MatTVec(self.clone(), u.clone()))
    }

    /// Outer product `self ⊗ other` with shape `[len(self), len(other)]`.
    pub fn outer(&self, other: &Var) -> Var {
        let (a, b) = (self.value().data(), other.value().data());
        let mut out = Vec::with_capacity(a.len() * b.len());
        for &ai in a {
            out.extend(b.iter().map(|&bj| ai * bj));
        }
        Var::from_op(Tensor::new(vec![a.len(), b.len()], out), Op::Outer(self.clone(), other.clone()))
    }

    /// Fixed matrix times `self`.
    pub fn const_matvec(&self, w: &Arc<Tensor>) -> Var {
        let v = Tensor::vector(matvec(w, self.value().data()));
        Var::from_op(v, Op::ConstMatVec(Arc::clone(w), self.clone()))
    }

    /// Transposed fixed matrix times `self`.
    pub fn const_matvec_t(&self, w: &Arc<Tensor>) -> Var {
        let v = Tensor::vector(matvec_t(w, self.value().data()));
        Var::from_op(v, Op::ConstMatTVec(Arc::clone(w), self.clone()))
    }

    /// Flattens and concatenates the parts into one vector.
    pub fn concat(parts: &[Var]) -> Var {
        let data: Vec<f64> = parts.iter().flat_map(|p| p.value().data().iter().copied()).collect();
        Var::from_op(Tensor::vector(data), Op::Concat(parts.to_vec()))
    }

    /// Contiguous flat slice starting at `offset`, reshaped to `shape`.
    pub fn slice(&self, offset: usize, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        let v = Tensor::new(shape.to_vec(), self.value().data[offset..offset + n].to_vec());
        Var::from_op(v, Op::Slice(self.clone(), offset))
    }

    /// Places `self` into a zero tensor of `shape` at flat `offset`.
    pub fn embed(&self, offset: usize, shape: &[usize]) -> Var {
        let mut v = Tensor::zeros(shape.to_vec());
        v.data[offset..offset + self.len()].copy_from_slice(self.value().data());
        Var::from_op(v, Op::Embed(self.clone(), offset))
    }

    /// Nearest-neighbour upsampling of a `[h, w, c]` image.
    pub fn upsample(&self, factor: usize) -> Var {
        if factor == 1 {
            return self.clone();
        }
        Var::from_op(upsample_nearest(self.value(), factor), Op::Upsample(self.clone(), factor))
    }

    /// Block sum over `factor × factor` windows; adjoint of [`Var::upsample`].
    pub fn sum_pool(&self, factor: usize) -> Var {
        if factor == 1 {
            return self.clone();
        }
        Var::from_op(sum_pool(self.value(), factor), Op::SumPool(self.clone(), factor))
    }

    pub fn conv(&self, conv: &Arc<Conv2d>) -> Var {
        Var::from_op(conv.forward(self.value()), Op::Conv(Arc::clone(conv), self.clone()))
    }

    fn conv_adjoint(&self, conv: &Arc<Conv2d>, h: usize, w: usize) -> Var {
        Var::from_op(conv.adjoint(self.value(), h, w), Op::ConvAdjoint(Arc::clone(conv), self.clone()))
    }

    /// Unit-norm rescaling of the whole tensor.
    pub fn normalize(&self) -> Var {
        let inv = self.norm().recip().broadcast(self.shape());
        self.mul(&inv)
    }

    /// Softmax over a vector. The max shift is a constant, which leaves the
    /// result and its derivatives unchanged.
    pub fn softmax(&self) -> Var {
        let max = self.value().data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = self.offset(-max).exp();
        let inv = e.sum().recip().broadcast(self.shape());
        e.mul(&inv)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cosine of the angle between two vectors, as a graph scalar.
pub fn cosine(a: &Var, b: &Var) -> Var {
    a.dot(b).mul(&a.norm().mul(&b.norm()).recip())
}

impl Op {
    fn parents(&self) -> Vec<&Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::MatVec(a, b) | Op::MatTVec(a, b) | Op::Outer(a, b) => vec![a, b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::Sum(a)
            | Op::Broadcast(a)
            | Op::Reshape(a)
            | Op::ConstMatVec(_, a)
            | Op::ConstMatTVec(_, a)
            | Op::Slice(a, _)
            | Op::Embed(a, _)
            | Op::Upsample(a, _)
            | Op::SumPool(a, _)
            | Op::Conv(_, a)
            | Op::ConvAdjoint(_, a) => vec![a],
            Op::Concat(parts) => parts.iter().collect(),
        }
    }
}

/// Vector-Jacobian products of `node` for upstream gradient `g`, one entry per
/// parent that requires a gradient.
fn backward(node: &Var, g: &Var) -> Vec<(Var, Var)> {
    let mut out = Vec::new();
    let mut push = |p: &Var, f: &dyn Fn() -> Var| {
        if p.requires_grad() {
            out.push((p.clone(), f()));
        }
    };
    match &node.0.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            push(a, &|| g.clone());
            push(b, &|| g.clone());
        }
        Op::Sub(a, b) => {
            push(a, &|| g.clone());
            push(b, &|| g.neg());
        }
        Op::Mul(a, b) => {
            push(a, &|| g.mul(b));
            push(b, &|| g.mul(a));
        }
        Op::Neg(a) => push(a, &|| g.neg()),
        Op::Scale(a, c) => push(a, &|| g.scale(*c)),
        Op::Offset(a) => push(a, &|| g.clone()),
        Op::Tanh(a) => push(a, &|| g.mul(&node.square().neg().offset(1.0))),
        Op::Sigmoid(a) => push(a, &|| g.mul(&node.mul(&node.neg().offset(1.0)))),
        Op::Exp(a) => push(a, &|| g.mul(node)),
        Op::Sqrt(a) => push(a, &|| g.mul(&node.recip().scale(0.5))),
        Op::Recip(a) => push(a, &|| g.mul(&node.square()).neg()),
        Op::Sum(a) => push(a, &|| g.broadcast(a.shape())),
        Op::Broadcast(a) => push(a, &|| g.sum().reshape(a.shape())),
        Op::Reshape(a) => push(a, &|| g.reshape(a.shape())),
        Op::MatVec(w, x) => {
            push(w, &|| g.outer(x));
            push(x, &|| w.matvec_t(g));
        }
        Op::MatTVec(w, u) => {
            push(w, &|| u.outer(g));
            push(u, &|| w.matvec(g));
        }
        Op::Outer(a, b) => {
            push(a, &|| g.matvec(b));
            push(b, &|| g.matvec_t(a));
        }
        Op::ConstMatVec(w, x) => push(x, &|| g.const_matvec_t(w)),
        Op::ConstMatTVec(w, u) => push(u, &|| g.const_matvec(w)),
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let o = offset;
                push(p, &|| g.slice(o, p.shape()));
                offset += p.len();
            }
        }
        Op::Slice(a, offset) => push(a, &|| g.embed(*offset, a.shape())),
        Op::Embed(a, offset) => push(a, &|| g.slice(*offset, a.shape())),
        Op::Upsample(a, f) => push(a, &|| g.sum_pool(*f)),
        Op::SumPool(a, f) => push(a, &|| g.upsample(*f)),
        Op::Conv(c, x) => push(x, &|| g.conv_adjoint(c, x.shape()[0], x.shape()[1])),
        Op::ConvAdjoint(c, u) => push(u, &|| g.conv(c)),
    }
    out
}

/// Gradients of the scalar `output` with respect to each of `wrt`.
///
/// The returned variables are graph nodes: differentiating them again yields
/// second derivatives. Inputs that `output` does not depend on get zeros.
pub fn grad(output: &Var, wrt: &[Var]) -> Vec<Var> {
    assert_eq!(output.len(), 1, "grad() needs a scalar output, got {:?}", output.shape());

    let mut order: Vec<Var> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.0.id) {
            continue;
        }
        for p in v.0.op.parents() {
            if p.requires_grad() && !seen.contains(&p.0.id) {
                stack.push(p.clone());
            }
        }
        order.push(v);
    }
    // Parents are always created before their children.
    order.sort_by_key(|v| std::cmp::Reverse(v.0.id));

    let mut adjoint: HashMap<u64, Var> = HashMap::new();
    adjoint.insert(output.0.id, Var::constant(Tensor::filled(output.shape().to_vec(), 1.0)));
    for node in &order {
        let Some(g) = adjoint.remove(&node.0.id) else {
            continue;
        };
        if matches!(node.0.op, Op::Leaf) {
            adjoint.insert(node.0.id, g);
            continue;
        }
        for (parent, gp) in backward(node, &g) {
            let acc = match adjoint.remove(&parent.0.id) {
                Some(prev) => prev.add(&gp),
                None => gp,
            };
            adjoint.insert(parent.0.id, acc);
        }
    }

    wrt.iter().map(|w| adjoint.get(&w.0.id).cloned().unwrap_or_else(|| Var::constant(Tensor::zeros(w.shape().to_vec())))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += eps;
                let mut m = x.clone();
                m.data_mut()[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            let scale = x.abs().max(y.abs()).max(1e-8);
            assert!((x - y).abs() / scale < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn elementwise_chain_matches_finite_differences() {
        let build = |x: &Var| {
            let y = x.tanh().mul(&x.sigmoid()).add(&x.exp().scale(0.1));
            y.square().offset(1.0).sqrt().recip().sum()
        };
        let x0 = Tensor::vector(vec![0.3, -0.7, 1.2, 0.05]);
        let x = Var::param(x0.clone());
        let g = grad(&build(&x), &[x]);
        let num = numeric_grad(&|t| build(&Var::constant(t.clone())).item(), &x0, 1e-6);
        assert_close(g[0].value().data(), &num, 1e-7);
    }

    #[test]
    fn matvec_family_gradients() {
        let build = |w: &Var, x: &Var| {
            let y = w.matvec(x).tanh();
            let z = w.matvec_t(&y);
            z.outer(&y).sum().add(&z.dot(x))
        };
        let w0 = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.3, 0.8, 0.2, -0.5]);
        let x0 = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let (w, x) = (Var::param(w0.clone()), Var::param(x0.clone()));
        let g = grad(&build(&w, &x), &[w, x]);
        let c = |t: &Tensor| Var::constant(t.clone());
        let gw = numeric_grad(&|t| build(&c(t), &c(&x0)).item(), &w0, 1e-6);
        let gx = numeric_grad(&|t| build(&c(&w0), &c(t)).item(), &x0, 1e-6);
        assert_close(g[0].value().data(), &gw, 1e-7);
        assert_close(g[1].value().data(), &gx, 1e-7);
    }

    #[test]
    fn conv_and_pool_are_adjoint_pairs() {
        let conv = Arc::new(Conv2d::new((0..2 * 3 * 9).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect(), 3, 2, 3, 2, 1));
        let x = Tensor::new(vec![6, 6, 3], (0..108).map(|i| (i as f64 * 0.37).sin()).collect());
        let y = conv.forward(&x);
        let u = Tensor::new(y.shape().to_vec(), (0..y.len()).map(|i| (i as f64 * 0.11).cos()).collect());
        let lhs: f64 = y.data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
        let xt = conv.adjoint(&u, 6, 6);
        let rhs: f64 = x.data().iter().zip(xt.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let up = upsample_nearest(&x, 2);
        let v = Tensor::new(up.shape().to_vec(), (0..up.len()).map(|i| (i as f64 * 0.3).sin()).collect());
        let lhs: f64 = up.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(sum_pool(&v, 2).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn second_derivative_through_grad() {
        // f(x) = sum(tanh(x)^3); the gradient of sum(grad f) is sum of f''.
        let x0 = Tensor::vector(vec![0.2, -0.4, 0.9]);
        let x = Var::param(x0.clone());
        let t = x.tanh();
        let f = t.mul(&t).mul(&t).sum();
        let g = grad(&f, std::slice::from_ref(&x)).remove(0);
        let h = grad(&g.sum(), &[x]).remove(0);
        let f2 = |v: f64| {
            let t = v.tanh();
            let s = 1.0 - t * t;
            6.0 * t * s * s - 6.0 * t * t * t * s
        };
        for (i, &v) in x0.data().iter().enumerate() {
            assert!((h.value().data()[i] - f2(v)).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_inputs_get_zero_gradients() {
        let a = Var::param(Tensor::vector(vec![1.0, 2.0]));
        let b = Var::param(Tensor::vector(vec![3.0]));
        let g = grad(&a.sum(), &[b]);
        assert_eq!(g[0].value().data(), &[0.0]);
    }

    #[test]
    fn softmax_is_on_simplex() {
        let x = Var::constant(Tensor::vector(vec![1000.0, 999.0, -5.0]));
        let s = x.softmax();
        let total: f64 = s.value().data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
