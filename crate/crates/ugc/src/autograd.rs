//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Values are computed eagerly when an op is recorded; [`Tape::backward`]
//! walks the tape in reverse. Nodes that cannot reach a gradient-requiring
//! leaf are never differentiated.

use std::cell::{Cell, RefCell};
use std::ops::Range;
use std::rc::Rc;

use crate::tensor::{col2im, gemm, im2col, ConvGeom, Real, Tensor};

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Abs(usize),
    Square(usize),
    Log(usize),
    Relu(usize),
    LeakyRelu(usize, T),
    Tanh(usize),
    Sigmoid(usize),
    Clamp(usize, T, T),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>),
    Gather { x: usize, dim0: Vec<Range<usize>>, dim1: Option<Vec<Range<usize>>> },
    NarrowBatch { x: usize, start: usize },
    Conv { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    ConvT { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    InstanceNorm { x: usize, inv_std: Vec<T> },
    Blur { x: usize, axis: usize, kernel: Rc<Vec<T>> },
    Gram(usize),
    TotalVariation(usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of a computation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    macs: Cell<u64>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of the loss with respect to `v`, if it depends on a parameter.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Removes and returns the gradient for `v`.
    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    /// Empty tape.
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), macs: Cell::new(0) }
    }

    /// Multiply-accumulates executed by convolutions recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Whether nothing has been recorded.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiates the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let acc = |pid: usize, contrib: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                match &mut grads[pid] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            };
            let val = |pid: usize| nodes[pid].value.clone();
            let needs = |pid: usize| nodes[pid].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Add(a, b) => {
                    if needs(*b) {
                        acc(*b, g.clone(), &mut grads);
                    }
                    if needs(*a) {
                        acc(*a, g, &mut grads);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        acc(*b, g.map(|v| -v), &mut grads);
                    }
                    if needs(*a) {
                        acc(*a, g, &mut grads);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(*a, g.zip(&val(*b), |gv, bv| gv * bv), &mut grads);
                    }
                    if needs(*b) {
                        acc(*b, g.zip(&val(*a), |gv, av| gv * av), &mut grads);
                    }
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    if needs(*a) {
                        acc(*a, g.zip(&bv, |gv, d| gv / d), &mut grads);
                    }
                    if needs(*b) {
                        let q = &node.value;
                        let t = g.zip(q, |gv, qv| gv * qv).zip(&bv, |x, d| -x / d);
                        acc(*b, t, &mut grads);
                    }
                }
                Op::Scale(x, s) => acc(*x, g.map(|v| v * *s), &mut grads),
                Op::AddScalar(x) => acc(*x, g, &mut grads),
                Op::Abs(x) => {
                    let t = g.zip(&val(*x), |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    });
                    acc(*x, t, &mut grads)
                }
                Op::Square(x) => acc(*x, g.zip(&val(*x), |gv, xv| gv * xv * T::of(2.0)), &mut grads),
                Op::Log(x) => acc(*x, g.zip(&val(*x), |gv, xv| gv / xv), &mut grads),
                Op::Relu(x) => {
                    acc(*x, g.zip(&val(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() }), &mut grads)
                }
                Op::LeakyRelu(x, s) => {
                    acc(*x, g.zip(&val(*x), |gv, xv| if xv > T::zero() { gv } else { gv * *s }), &mut grads)
                }
                Op::Tanh(x) => acc(*x, g.zip(&node.value, |gv, y| gv * (T::one() - y * y)), &mut grads),
                Op::Sigmoid(x) => acc(*x, g.zip(&node.value, |gv, y| gv * y * (T::one() - y)), &mut grads),
                Op::Clamp(x, lo, hi) => acc(
                    *x,
                    g.zip(&val(*x), |gv, xv| if xv >= *lo && xv <= *hi { gv } else { T::zero() }),
                    &mut grads,
                ),
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    acc(*x, Tensor::full(val(*x).shape(), gv), &mut grads)
                }
                Op::Mean(x) => {
                    let xs = val(*x);
                    let gv = g.data()[0] / T::of(xs.numel() as f64);
                    acc(*x, Tensor::full(xs.shape(), gv), &mut grads)
                }
                Op::Concat(parts) => {
                    let (n, _, h, w) = g.dims4();
                    let hw = h * w;
                    let total_c = g.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let c = nodes[p].value.shape()[1];
                        if needs(p) {
                            let mut part = Vec::with_capacity(n * c * hw);
                            for b in 0..n {
                                let start = (b * total_c + offset) * hw;
                                part.extend_from_slice(&g.data()[start..start + c * hw]);
                            }
                            acc(p, Tensor::from_vec(&[n, c, h, w], part), &mut grads);
                        }
                        offset += c;
                    }
                }
                Op::Gather { x, dim0, dim1 } => {
                    let src_shape = val(*x).shape().to_vec();
                    let mut out = Tensor::zeros(&src_shape);
                    gather_apply(&src_shape, dim0, dim1.as_deref(), |s, d, len| {
                        for i in 0..len {
                            out.data_mut()[s + i] += g.data()[d + i];
                        }
                    });
                    acc(*x, out, &mut grads)
                }
                Op::NarrowBatch { x, start } => {
                    let xs = val(*x);
                    let mut out = Tensor::zeros(xs.shape());
                    let per: usize = xs.shape()[1..].iter().product();
                    out.data_mut()[start * per..start * per + g.numel()].copy_from_slice(g.data());
                    acc(*x, out, &mut grads)
                }
                Op::Conv { x, w, b, stride, pad } => {
                    let (dx, dw) = conv_backward(&val(*x), &val(*w), &g, *stride, *pad, needs(*x), needs(*w));
                    if let Some(dx) = dx {
                        acc(*x, dx, &mut grads);
                    }
                    if let Some(dw) = dw {
                        acc(*w, dw, &mut grads);
                    }
                    if let Some(b) = b {
                        if needs(*b) {
                            acc(*b, channel_sums(&g), &mut grads);
                        }
                    }
                }
                Op::ConvT { x, w, b, stride, pad } => {
                    let (dx, dw) = conv_t_backward(&val(*x), &val(*w), &g, *stride, *pad, needs(*x), needs(*w));
                    if let Some(dx) = dx {
                        acc(*x, dx, &mut grads);
                    }
                    if let Some(dw) = dw {
                        acc(*w, dw, &mut grads);
                    }
                    if let Some(b) = b {
                        if needs(*b) {
                            acc(*b, channel_sums(&g), &mut grads);
                        }
                    }
                }
                Op::InstanceNorm { x, inv_std } => {
                    let y = &node.value;
                    let (n, c, h, w) = y.dims4();
                    let hw = h * w;
                    let mut dx = vec![T::zero(); n * c * hw];
                    let inv_hw = T::of(1.0 / hw as f64);
                    for plane in 0..n * c {
                        let r = plane * hw..(plane + 1) * hw;
                        let (gy, yy) = (&g.data()[r.clone()], &y.data()[r.clone()]);
                        let mean_g = gy.iter().copied().sum::<T>() * inv_hw;
                        let mean_gy = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum::<T>() * inv_hw;
                        for (i, o) in dx[r].iter_mut().enumerate() {
                            *o = inv_std[plane] * (gy[i] - mean_g - yy[i] * mean_gy);
                        }
                    }
                    acc(*x, Tensor::from_vec(&[n, c, h, w], dx), &mut grads)
                }
                Op::Blur { x, axis, kernel } => {
                    let xs = val(*x);
                    acc(*x, blur_backward(xs.shape(), &g, *axis, kernel), &mut grads)
                }
                Op::Gram(x) => {
                    let xs = val(*x);
                    let (n, c, h, w) = xs.dims4();
                    let hw = h * w;
                    let norm = T::of(1.0 / (c * hw) as f64);
                    let mut dx = vec![T::zero(); n * c * hw];
                    for b in 0..n {
                        let gb = &g.data()[b * c * c..(b + 1) * c * c];
                        let sym: Vec<T> =
                            (0..c * c).map(|i| gb[i] + gb[(i % c) * c + i / c]).collect();
                        let xb = &xs.data()[b * c * hw..(b + 1) * c * hw];
                        gemm(c, c, hw, &sym, false, xb, false, &mut dx[b * c * hw..(b + 1) * c * hw], norm, T::zero());
                    }
                    acc(*x, Tensor::from_vec(xs.shape(), dx), &mut grads)
                }
                Op::TotalVariation(x) => {
                    let xs = val(*x);
                    acc(*x, tv_backward(&xs, g.data()[0]), &mut grads)
                }
            }
        }
        Grads { grads }
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Current value.
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    /// Shape of the value.
    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// The value as `f64` when it holds one element.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.numel(), 1, "item() on a non-scalar");
        v.data()[0].f64()
    }

    /// Whether a gradient flows through this value.
    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t, T>, f: impl Fn(T, T) -> T, op: Op<T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        let needs = self.requires_grad() || other.requires_grad();
        self.tape.push(a.zip(&b, f), op, needs)
    }

    /// Elementwise sum.
    pub fn add(&self, o: &Var<'t, T>) -> Var<'t, T> {
        self.binary(o, |a, b| a + b, Op::Add(self.id, o.id))
    }

    /// Elementwise difference.
    pub fn sub(&self, o: &Var<'t, T>) -> Var<'t, T> {
        self.binary(o, |a, b| a - b, Op::Sub(self.id, o.id))
    }

    /// Elementwise product.
    pub fn mul(&self, o: &Var<'t, T>) -> Var<'t, T> {
        self.binary(o, |a, b| a * b, Op::Mul(self.id, o.id))
    }

    /// Elementwise quotient.
    pub fn div(&self, o: &Var<'t, T>) -> Var<'t, T> {
        self.binary(o, |a, b| a / b, Op::Div(self.id, o.id))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        self.unary(self.value().map(|v| v * s), Op::Scale(self.id, s))
    }

    /// Addition of a constant.
    pub fn add_scalar(&self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        self.unary(self.value().map(|v| v + s), Op::AddScalar(self.id))
    }

    /// Absolute value.
    pub fn abs(&self) -> Var<'t, T> {
        self.unary(self.value().map(|v| v.abs()), Op::Abs(self.id))
    }

    /// Elementwise square.
    pub fn square(&self) -> Var<'t, T> {
        self.unary(self.value().map(|v| v * v), Op::Square(self.id))
    }

    /// Natural logarithm.
    pub fn log(&self) -> Var<'t, T> {
        self.unary(self.value().map(|v| v.ln()), Op::Log(self.id))
    }

    /// Rectifier.
    pub fn relu(&self) -> Var<'t, T> {
        self.unary(self.value().map(|v| v.max(T::zero())), Op::Relu(self.id))
    }

    /// Leaky rectifier with negative `slope`.
    pub fn leaky_relu(&self, slope: f64) -> Var<'t, T> {
        let s = T::of(slope);
        self.unary(self.value().map(|v| if v > T::zero() { v } else { v * s }), Op::LeakyRelu(self.id, s))
    }

    /// Hyperbolic tangent.
    pub fn tanh(&self) -> Var<'t, T> {
        self.unary(self.value().map(|v| v.tanh()), Op::Tanh(self.id))
    }

    /// Logistic sigmoid.
    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(self.value().map(|v| T::one() / (T::one() + (-v).exp())), Op::Sigmoid(self.id))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t, T> {
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary(self.value().map(|v| v.max(l).min(h)), Op::Clamp(self.id, l, h))
    }

    /// Sum of all elements.
    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().data().iter().copied().sum::<T>();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    /// Mean of all elements.
    pub fn mean(&self) -> Var<'t, T> {
        let v = self.value();
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Channel concatenation of 4-d tensors.
    pub fn concat(parts: &[Var<'t, T>]) -> Var<'t, T> {
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = values[0].dims4();
        let total_c: usize = values.iter().map(|v| v.shape()[1]).sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for v in &values {
                let (vn, c, vh, vw) = v.dims4();
                assert!(vn == n && vh == h && vw == w, "concat shape mismatch");
                data.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let needs = parts.iter().any(|p| p.requires_grad());
        tape.push(Tensor::from_vec(&[n, total_c, h, w], data), Op::Concat(parts.iter().map(|p| p.id).collect()), needs)
    }

    /// Selects index ranges along the first (and optionally second) axis.
    ///
    /// Used to slice the leading channels of shared weights; the backward
    /// pass scatters gradients into the full tensor.
    pub fn gather(&self, dim0: &[Range<usize>], dim1: Option<&[Range<usize>]>) -> Var<'t, T> {
        let src = self.value();
        let shape = src.shape();
        assert!(dim1.is_none() || shape.len() >= 2);
        for r in dim0 {
            assert!(r.end <= shape[0], "gather range {r:?} exceeds {shape:?}");
        }
        if let Some(d1) = dim1 {
            for r in d1 {
                assert!(r.end <= shape[1], "gather range {r:?} exceeds {shape:?}");
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = dim0.iter().map(|r| r.len()).sum();
        if let Some(d1) = dim1 {
            out_shape[1] = d1.iter().map(|r| r.len()).sum();
        }
        let mut out = Tensor::zeros(&out_shape);
        gather_apply(shape, dim0, dim1, |s, d, len| {
            out.data_mut()[d..d + len].copy_from_slice(&src.data()[s..s + len]);
        });
        self.unary(out, Op::Gather { x: self.id, dim0: dim0.to_vec(), dim1: dim1.map(|d| d.to_vec()) })
    }

    /// Samples `[start, start + len)` of the batch.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Var<'t, T> {
        self.unary(self.value().narrow_batch(start, len), Op::NarrowBatch { x: self.id, start })
    }

    /// 2-d convolution with zero padding; weight `(out, in, k, k)`.
    pub fn conv2d(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>, stride: usize, pad: usize) -> Var<'t, T> {
        let (x, wv) = (self.value(), w.value());
        let bv = b.map(|b| b.value());
        let y = conv_forward(&x, &wv, bv.as_deref(), stride, pad);
        let (n, _, _, _) = x.dims4();
        let (_, oc, oh, ow) = y.dims4();
        let k = wv.shape()[2];
        self.tape.macs.set(self.tape.macs.get() + (n * wv.shape()[1] * oc * k * k * oh * ow) as u64);
        let needs = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        self.tape.push(y, Op::Conv { x: self.id, w: w.id, b: b.map(|b| b.id), stride, pad }, needs)
    }

    /// Transposed 2-d convolution; weight `(in, out, k, k)`.
    pub fn conv_transpose2d(
        &self,
        w: &Var<'t, T>,
        b: Option<&Var<'t, T>>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Var<'t, T> {
        let (x, wv) = (self.value(), w.value());
        let bv = b.map(|b| b.value());
        let y = conv_t_forward(&x, &wv, bv.as_deref(), stride, pad, output_padding);
        let (n, _, _, _) = x.dims4();
        let (_, oc, oh, ow) = y.dims4();
        let k = wv.shape()[2];
        self.tape.macs.set(self.tape.macs.get() + (n * wv.shape()[0] * oc * k * k * oh * ow) as u64);
        let needs = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        self.tape.push(y, Op::ConvT { x: self.id, w: w.id, b: b.map(|b| b.id), stride, pad }, needs)
    }

    /// Per-sample, per-channel normalization over the spatial axes (no affine).
    pub fn instance_norm(&self, eps: f64) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut y = vec![T::zero(); x.numel()];
        let mut inv_std = Vec::with_capacity(n * c);
        for plane in 0..n * c {
            let r = plane * hw..(plane + 1) * hw;
            let xs = &x.data()[r.clone()];
            let mean = xs.iter().map(|v| v.f64()).sum::<f64>() / hw as f64;
            let var = xs.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / hw as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in y[r].iter_mut().zip(xs) {
                *o = T::of((v.f64() - mean) * inv);
            }
            inv_std.push(T::of(inv));
        }
        self.unary(Tensor::from_vec(&[n, c, h, w], y), Op::InstanceNorm { x: self.id, inv_std })
    }

    /// Valid 1-d correlation with `kernel` along `axis` (2 = rows, 3 = columns).
    pub fn blur(&self, axis: usize, kernel: Rc<Vec<T>>) -> Var<'t, T> {
        let y = blur_forward(&self.value(), axis, &kernel);
        self.unary(y, Op::Blur { x: self.id, axis, kernel })
    }

    /// Per-sample Gram matrices `F F^T / (C H W)`, shape `(N, C, C)`.
    pub fn gram(&self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let norm = T::of(1.0 / (c * hw) as f64);
        let mut out = vec![T::zero(); n * c * c];
        for b in 0..n {
            let xb = &x.data()[b * c * hw..(b + 1) * c * hw];
            gemm(c, hw, c, xb, false, xb, true, &mut out[b * c * c..(b + 1) * c * c], norm, T::zero());
        }
        self.unary(Tensor::from_vec(&[n, c, c], out), Op::Gram(self.id))
    }

    /// Mean absolute difference between horizontal and vertical neighbours,
    /// pooled over both directions.
    pub fn total_variation(&self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(h >= 2 && w >= 2, "total variation needs spatial dims >= 2");
        let d = x.data();
        let mut acc = 0.0f64;
        for plane in 0..n * c {
            let p = &d[plane * h * w..(plane + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    if j + 1 < w {
                        acc += (p[i * w + j + 1] - p[i * w + j]).abs().f64();
                    }
                    if i + 1 < h {
                        acc += (p[(i + 1) * w + j] - p[i * w + j]).abs().f64();
                    }
                }
            }
        }
        let count = n * c * (h * (w - 1) + (h - 1) * w);
        self.unary(Tensor::scalar(T::of(acc / count as f64)), Op::TotalVariation(self.id))
    }
}

fn gather_apply(
    shape: &[usize],
    dim0: &[Range<usize>],
    dim1: Option<&[Range<usize>]>,
    mut f: impl FnMut(usize, usize, usize),
) {
    let inner: usize = shape.iter().skip(2).product();
    match dim1 {
        None => {
            let row: usize = shape[1..].iter().product();
            let mut d = 0;
            for r in dim0 {
                f(r.start * row, d, r.len() * row);
                d += r.len() * row;
            }
        }
        Some(d1) => {
            let full1 = shape[1];
            let mut d = 0;
            for r0 in dim0 {
                for i in r0.clone() {
                    for r1 in d1 {
                        let len = r1.len() * inner;
                        f((i * full1 + r1.start) * inner, d, len);
                        d += len;
                    }
                }
            }
        }
    }
}

fn channel_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = g.dims4();
    let hw = h * w;
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let start = (b * c + ch) * hw;
            *o += g.data()[start..start + hw].iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(&[c], out)
}

fn conv_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize, pad: usize) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let (oc, ic, k, k2) = w.dims4();
    assert_eq!(ic, c, "conv input has {c} channels, weight expects {ic}");
    assert_eq!(k, k2);
    let g = ConvGeom::conv(c, h, wd, k, stride, pad);
    let mut y = vec![T::zero(); n * oc * g.cols()];
    let mut col = vec![T::zero(); g.rows() * g.cols()];
    for bi in 0..n {
        let xb = &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
        let yb = &mut y[bi * oc * g.cols()..(bi + 1) * oc * g.cols()];
        if k == 1 && stride == 1 && pad == 0 {
            gemm(oc, c, g.cols(), w.data(), false, xb, false, yb, T::one(), T::zero());
        } else {
            im2col(xb, &g, &mut col);
            gemm(oc, g.rows(), g.cols(), w.data(), false, &col, false, yb, T::one(), T::zero());
        }
        if let Some(b) = b {
            for (ch, plane) in yb.chunks_mut(g.cols()).enumerate() {
                let bv = b.data()[ch];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::from_vec(&[n, oc, g.oh, g.ow], y)
}

fn conv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, wd) = x.dims4();
    let (oc, _, k, _) = w.dims4();
    let g = ConvGeom::conv(c, h, wd, k, stride, pad);
    let mut dx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_w.then(|| vec![T::zero(); w.numel()]);
    let mut col = vec![T::zero(); g.rows() * g.cols()];
    for bi in 0..n {
        let xb = &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
        let gb = &gy.data()[bi * oc * g.cols()..(bi + 1) * oc * g.cols()];
        if let Some(dw) = dw.as_mut() {
            im2col(xb, &g, &mut col);
            gemm(oc, g.cols(), g.rows(), gb, false, &col, true, dw, T::one(), T::one());
        }
        if let Some(dx) = dx.as_mut() {
            gemm(g.rows(), oc, g.cols(), w.data(), true, gb, false, &mut col, T::one(), T::zero());
            col2im(&col, &g, &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd]);
        }
    }
    (dx.map(|d| Tensor::from_vec(x.shape(), d)), dw.map(|d| Tensor::from_vec(w.shape(), d)))
}

fn conv_t_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let (ic, oc, k, _) = w.dims4();
    assert_eq!(ic, c, "transposed conv input has {c} channels, weight expects {ic}");
    let oh = (h - 1) * stride + k + output_padding - 2 * pad;
    let ow = (wd - 1) * stride + k + output_padding - 2 * pad;
    // The output is the image of a regular convolution that maps (oh, ow) back to (h, wd).
    let g = ConvGeom { channels: oc, h: oh, w: ow, k, stride, pad, oh: h, ow: wd };
    let mut y = vec![T::zero(); n * oc * oh * ow];
    let mut col = vec![T::zero(); g.rows() * g.cols()];
    for bi in 0..n {
        let xb = &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
        gemm(g.rows(), c, g.cols(), w.data(), true, xb, false, &mut col, T::one(), T::zero());
        let yb = &mut y[bi * oc * oh * ow..(bi + 1) * oc * oh * ow];
        col2im(&col, &g, yb);
        if let Some(b) = b {
            for (ch, plane) in yb.chunks_mut(oh * ow).enumerate() {
                let bv = b.data()[ch];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::from_vec(&[n, oc, oh, ow], y)
}

fn conv_t_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, wd) = x.dims4();
    let (_, oc, k, _) = w.dims4();
    let (_, _, oh, ow) = gy.dims4();
    let g = ConvGeom { channels: oc, h: oh, w: ow, k, stride, pad, oh: h, ow: wd };
    let mut dx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_w.then(|| vec![T::zero(); w.numel()]);
    let mut col = vec![T::zero(); g.rows() * g.cols()];
    for bi in 0..n {
        let gb = &gy.data()[bi * oc * oh * ow..(bi + 1) * oc * oh * ow];
        im2col(gb, &g, &mut col);
        if let Some(dx) = dx.as_mut() {
            gemm(c, g.rows(), g.cols(), w.data(), false, &col, false, &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd], T::one(), T::zero());
        }
        if let Some(dw) = dw.as_mut() {
            let xb = &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
            gemm(c, g.cols(), g.rows(), xb, false, &col, true, dw, T::one(), T::one());
        }
    }
    (dx.map(|d| Tensor::from_vec(x.shape(), d)), dw.map(|d| Tensor::from_vec(w.shape(), d)))
}

fn blur_forward<T: Real>(x: &Tensor<T>, axis: usize, kernel: &[T]) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let kl = kernel.len();
    let (oh, ow) = if axis == 2 { (h + 1 - kl, w) } else { (h, w + 1 - kl) };
    assert!(kl <= if axis == 2 { h } else { w }, "window {kl} larger than image");
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let mut s = T::zero();
                for (t, &kv) in kernel.iter().enumerate() {
                    let v = if axis == 2 { src[(i + t) * w + j] } else { src[i * w + j + t] };
                    s += kv * v;
                }
                dst[i * ow + j] = s;
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

fn blur_backward<T: Real>(shape: &[usize], gy: &Tensor<T>, axis: usize, kernel: &[T]) -> Tensor<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (_, _, oh, ow) = gy.dims4();
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let g = &gy.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let d = &mut dx[plane * h * w..(plane + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let gv = g[i * ow + j];
                for (t, &kv) in kernel.iter().enumerate() {
                    if axis == 2 {
                        d[(i + t) * w + j] += kv * gv;
                    } else {
                        d[i * w + j + t] += kv * gv;
                    }
                }
            }
        }
    }
    Tensor::from_vec(shape, dx)
}

fn tv_backward<T: Real>(x: &Tensor<T>, g: T) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let count = n * c * (h * (w - 1) + (h - 1) * w);
    let scale = g / T::of(count as f64);
    let sign = |v: T| {
        if v > T::zero() {
            T::one()
        } else if v < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    };
    let mut dx = vec![T::zero(); x.numel()];
    for plane in 0..n * c {
        let p = &x.data()[plane * h * w..(plane + 1) * h * w];
        let d = &mut dx[plane * h * w..(plane + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                if j + 1 < w {
                    let s = sign(p[i * w + j + 1] - p[i * w + j]) * scale;
                    d[i * w + j + 1] += s;
                    d[i * w + j] -= s;
                }
                if i + 1 < h {
                    let s = sign(p[(i + 1) * w + j] - p[i * w + j]) * scale;
                    d[(i + 1) * w + j] += s;
                    d[i * w + j] -= s;
                }
            }
        }
    }
    Tensor::from_vec(x.shape(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(loss)/d(input) for a closure building
    /// the loss from one parameter leaf.
    fn check<F>(shape: &[usize], seed: u64, build: F)
    where
        F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Var<'t, f64>,
    {
        let x0 = rand_tensor(shape, seed);
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let loss = build(&tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).unwrap().clone();
        let eps = 1e-5;
        let mut num = vec![0.0; x0.numel()];
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let t = Tape::new();
                let v = t.param(xp);
                build(&t, v).item()
            };
            num[i] = (eval(eps) - eval(-eps)) / (2.0 * eps);
        }
        let diff: f64 = analytic.data().iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / norm < 1e-6, "relative gradient error {}", diff / norm);
    }

    #[test]
    fn conv_gradients() {
        let w = rand_tensor(&[4, 3, 3, 3], 1);
        let b = rand_tensor(&[4], 2);
        check(&[2, 3, 6, 5], 3, |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            x.conv2d(&wv, Some(&bv), 2, 1).square().mean()
        });
        let xin = rand_tensor(&[2, 3, 6, 6], 4);
        check(&[4, 3, 3, 3], 5, |t, wv| t.constant(xin.clone()).conv2d(&wv, None, 1, 1).square().mean());
        check(&[4], 6, |t, bv| {
            t.constant(xin.clone()).conv2d(&t.constant(w.clone()), Some(&bv), 1, 0).square().mean()
        });
    }

    #[test]
    fn conv_transpose_gradients() {
        let w = rand_tensor(&[3, 2, 3, 3], 7);
        check(&[2, 3, 4, 4], 8, |t, x| x.conv_transpose2d(&t.constant(w.clone()), None, 2, 1, 1).square().mean());
        let xin = rand_tensor(&[1, 3, 4, 4], 9);
        check(&[3, 2, 4, 4], 10, |t, wv| t.constant(xin.clone()).conv_transpose2d(&wv, None, 2, 1, 0).square().mean());
        let bias = rand_tensor(&[2], 11);
        check(&[2], 12, |t, bv| {
            let _ = &bias;
            t.constant(xin.clone()).conv_transpose2d(&t.constant(w.clone()), Some(&bv), 2, 1, 1).square().mean()
        });
    }

    #[test]
    fn conv_transpose_output_size() {
        let t = Tape::<f64>::new();
        let x = t.constant(rand_tensor(&[1, 3, 8, 8], 1));
        let y = x.conv_transpose2d(&t.constant(rand_tensor(&[3, 5, 3, 3], 2)), None, 2, 1, 1);
        assert_eq!(y.shape(), vec![1, 5, 16, 16]);
        let y = x.conv_transpose2d(&t.constant(rand_tensor(&[3, 5, 4, 4], 2)), None, 2, 1, 0);
        assert_eq!(y.shape(), vec![1, 5, 16, 16]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = rand_tensor(&[1, 2, 5, 5], 20);
        let w = rand_tensor(&[3, 2, 3, 3], 21);
        let t = Tape::new();
        let y = t.constant(x.clone()).conv2d(&t.constant(w.clone()), None, 2, 1).value();
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += x.data()[(c * 5 + iy as usize) * 5 + ix as usize]
                                        * w.data()[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    assert!((y.data()[(o * 3 + oy) * 3 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pointwise_gradients() {
        let other = rand_tensor(&[2, 3, 4, 4], 30).map(|v| v.abs() + 0.5);
        check(&[2, 3, 4, 4], 31, |t, x| x.mul(&t.constant(other.clone())).tanh().mean());
        check(&[2, 3, 4, 4], 32, |t, x| x.div(&t.constant(other.clone())).sigmoid().sum());
        check(&[2, 3, 4, 4], 33, |t, x| t.constant(other.clone()).div(&x.square().add_scalar(1.0)).mean());
        check(&[2, 3, 4, 4], 34, |_, x| x.leaky_relu(0.2).abs().mean());
        check(&[2, 3, 4, 4], 35, |_, x| x.sigmoid().clamp(0.1, 0.9).log().mean());
        check(&[2, 3, 4, 4], 36, |t, x| x.sub(&t.constant(other.clone())).relu().scale(3.0).mean());
    }

    #[test]
    fn structural_gradients() {
        let other = rand_tensor(&[2, 2, 4, 4], 40);
        check(&[2, 3, 4, 4], 41, |t, x| Var::concat(&[x, t.constant(other.clone())]).square().mean());
        check(&[2, 3, 4, 4], 42, |_, x| x.instance_norm(1e-5).mul(&x).mean());
        check(&[2, 3, 4, 4], 43, |_, x| x.gram().square().sum());
        check(&[2, 3, 5, 6], 44, |_, x| x.total_variation());
        let k = Rc::new(vec![0.2, 0.5, 0.3]);
        check(&[2, 3, 5, 6], 45, |_, x| x.blur(2, k.clone()).blur(3, k.clone()).square().mean());
        check(&[3, 4, 3, 3], 46, |_, x| x.gather(&[0..2], Some(&[0..1, 2..4])).square().sum());
        check(&[5], 47, |_, x| x.gather(&[1..3], None).square().sum());
        check(&[3, 2, 2, 2], 48, |_, x| x.narrow_batch(1, 2).square().sum());
    }

    #[test]
    fn gather_selects_prefixes() {
        let t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_vec(&[2, 3, 1, 1], (0..6).map(f64::from).collect()));
        let y = x.gather(&[0..1], Some(&[0..1, 2..3]));
        assert_eq!(y.value().data(), &[0.0, 2.0]);
        assert_eq!(y.shape(), vec![1, 2, 1, 1]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let t = Tape::<f64>::new();
        let c = t.constant(rand_tensor(&[1, 1, 2, 2], 1));
        let p = t.param(rand_tensor(&[1, 1, 2, 2], 2));
        let loss = c.mul(&p).sum();
        let g = t.backward(loss);
        assert!(g.get(c).is_none());
        assert!(g.get(p).is_some());
    }

    #[test]
    fn mac_counter_matches_formula() {
        let t = Tape::<f32>::new();
        let x = t.constant(Tensor::zeros(&[2, 3, 64, 64]));
        let _ = x.conv2d(&t.constant(Tensor::zeros(&[8, 3, 3, 3])), None, 1, 1);
        assert_eq!(t.macs(), 2 * 884_736);
    }
}
