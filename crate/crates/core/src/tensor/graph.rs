//! Reverse-mode autodiff over a linear record of executed ops.
//!
//! Nodes are appended in execution order, which is a topological order, so
//! `backward` walks the record once from the loss down to index zero.

use super::kernels;
use super::{strides, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Depthwise { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvT { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, output_pad: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Softmax(Var),
    Matmul { a: Var, b: Var },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Binary { kind: Binary, a: Var, b: Var },
    Scale { x: Var, s: T },
    AddScalar(Var),
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    BceWithLogits { x: Var, target: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: &'static str,
}

/// Recorded computation. Values are immutable once pushed.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

fn binary_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// For each output element, the offset of the matching element of an
/// operand that broadcasts along its size-1 axes.
fn broadcast_offsets(from: &[usize], to: &[usize]) -> Vec<usize> {
    let src = strides(from);
    let n: usize = to.iter().product();
    let mut idx = vec![0usize; to.len()];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let off: usize = idx.iter().zip(from).zip(&src).map(|((&i, &f), &s)| if f == 1 { 0 } else { i * s }).sum();
        out.push(off);
        for d in (0..to.len()).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn split_matmul(shape: &[usize]) -> Option<(&[usize], usize, usize)> {
    let r = shape.len();
    (r >= 2).then(|| (&shape[..r - 2], shape[r - 2], shape[r - 1]))
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!("non-finite value produced by {name}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, name });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric("non-finite leaf tensor".into()));
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, name: "leaf" });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
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

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if `v` requires grad.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push("conv2d", out, Op::Conv2d { x, w, b, stride, pad }, &ins)
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::depthwise_conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push("depthwise_conv2d", out, Op::Depthwise { x, w, b, stride, pad }, &ins)
    }

    /// Depthwise `kh×kw` filtering followed by a pointwise `1×1` channel mix.
    #[allow(clippy::too_many_arguments)]
    pub fn separable_conv2d(&mut self, x: Var, depthwise: Var, pointwise: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let c = self.shape(x).get(1).copied();
        let pw = self.shape(pointwise).to_vec();
        if pw.len() != 4 || pw[2] != 1 || pw[3] != 1 || Some(pw[1]) != c {
            return Err(Error::shape(
                "separable_conv2d",
                format!("pointwise kernel {pw:?} must be [O,{},1,1]", c.unwrap_or(0)),
            ));
        }
        let d = self.depthwise_conv2d(x, depthwise, None, stride, pad)?;
        self.conv2d(d, pointwise, bias, 1, 0)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, output_pad: usize) -> Result<Var> {
        let out = kernels::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad, output_pad)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push("conv_transpose2d", out, Op::ConvT { x, w, b, stride, pad, output_pad }, &ins)
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2d(self.value(x), k, stride, pad)?;
        self.push("maxpool2d", out, Op::MaxPool { x, argmax }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::softplus);
        self.push("softplus", out, Op::Softplus(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    /// Softmax along `axis`; only the last axis is supported.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() == 0 || axis != t.ndim() - 1 {
            return Err(Error::shape("softmax", format!("axis {axis} must be the last axis of {:?}", t.shape())));
        }
        let row = t.shape()[axis];
        let out = Tensor::new(t.shape().to_vec(), kernels::softmax_rows(t.data(), row))?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Batched `[...,M,K] · [...,K,N]`. Leading dims must agree, or one
    /// operand is a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((ba, m, k), (bb, k2, n)) = match (split_matmul(ta.shape()), split_matmul(tb.shape())) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::shape("matmul", format!("operands must be at least 2-d, got {:?} and {:?}", ta.shape(), tb.shape()))),
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dimensions differ: {:?} · {:?}", ta.shape(), tb.shape())));
        }
        let batch = if ba == bb || bb.is_empty() {
            ba.to_vec()
        } else if ba.is_empty() {
            bb.to_vec()
        } else {
            return Err(Error::shape("matmul", format!("batch dims differ: {ba:?} vs {bb:?}")));
        };
        let nb: usize = batch.iter().product();
        let (sa, sb) = (if ba.is_empty() { 0 } else { m * k }, if bb.is_empty() { 0 } else { k * n });
        let mut out = vec![T::zero(); nb * m * n];
        for i in 0..nb {
            kernels::gemm_nn(m, k, n, &ta.data()[i * sa..i * sa + m * k], &tb.data()[i * sb..i * sb + k * n], &mut out[i * m * n..(i + 1) * m * n]);
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let out = Tensor::new(shape, out)?;
        self.push("matmul", out, Op::Matmul { a, b }, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self
            .value(x)
            .reshape(shape.to_vec())
            .map_err(|_| Error::shape("reshape", format!("cannot view {:?} as {shape:?}", self.shape(x))))?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = vec![false; t.ndim()];
        if axes.len() != t.ndim() || axes.iter().any(|&a| a >= t.ndim() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("{axes:?} is not a permutation of {} axes", t.ndim())));
        }
        let out = permute_tensor(t, axes);
        self.push("permute", out, Op::Permute { x, axes: axes.to_vec() }, &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", "needs at least 2 axes"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = binary_shape(name, ta.shape(), tb.shape())?;
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = broadcast_offsets(ta.shape(), &shape);
            let ob = broadcast_offsets(tb.shape(), &shape);
            oa.iter().zip(&ob).map(|(&i, &j)| f(ta.data()[i], tb.data()[j])).collect()
        };
        let out = Tensor::new(shape, data)?;
        self.push(name, out, Op::Binary { kind, a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, Op::Scale { x, s }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        self.push("add_scalar", out, Op::AddScalar(x), &[x])
    }

    /// Sum over one axis, kept with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(Error::shape("sum", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, ext, inner) = axis_split(t.shape(), axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &t.data()[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let out = Tensor::new(shape, data)?;
        self.push("sum", out, Op::SumAxis { x, axis }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("mean", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.sum_all(x)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", format!("{s:?} does not match {base:?} off axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() || start + len > t.shape()[axis] || len == 0 {
            return Err(Error::shape("narrow", format!("range {start}..{} on axis {axis} of {:?}", start + len, t.shape())));
        }
        let (outer, ext, inner) = axis_split(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        self.push("narrow", out, Op::Narrow { x, axis, start }, &[x])
    }

    /// Mean binary cross-entropy of logits against a fixed target, in the
    /// overflow-free form `max(x,0) − x·y + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != target.shape() {
            return Err(Error::shape("bce", format!("logits {:?} vs target {:?}", t.shape(), target.shape())));
        }
        if t.is_empty() {
            return Err(Error::shape("bce", "empty input"));
        }
        let sum: T = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(sum / T::lit(t.len() as f64));
        self.push("bce", out, Op::BceWithLogits { x, target: target.clone() }, &[x])
    }

    /// Runs reverse accumulation from a single-element `target`.
    ///
    /// Afterwards every node that requires grad holds one (leaves that do
    /// not feed `target` get zeros); nodes that do not require grad get none.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        if self.value(target).len() != 1 {
            return Err(Error::shape("backward", format!("target must be a single element, got {:?}", self.shape(target))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[target.0] = Some(vec![T::one()]);
        for i in (0..=target.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return Ok(None);
                }
                let data = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                Tensor::new(node.value.shape().to_vec(), data).map(Some)
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if self.wants(v) {
            accumulate(&mut grads[v.0], delta);
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gt = || Tensor::new(node.value.shape().to_vec(), g.to_vec());
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = kernels::conv2d_backward(self.value(x), self.value(w), &gt()?, stride, pad)?;
                self.send(grads, x, gx.into_data());
                self.send(grads, w, gw.into_data());
                if let Some(b) = b {
                    self.send(grads, b, gb.into_data());
                }
            }
            &Op::Depthwise { x, w, b, stride, pad } => {
                let (gx, gw, gb) = kernels::depthwise_conv2d_backward(self.value(x), self.value(w), &gt()?, stride, pad)?;
                self.send(grads, x, gx.into_data());
                self.send(grads, w, gw.into_data());
                if let Some(b) = b {
                    self.send(grads, b, gb.into_data());
                }
            }
            &Op::ConvT { x, w, b, stride, pad, output_pad } => {
                let (gx, gw, gb) = kernels::conv_transpose2d_backward(self.value(x), self.value(w), &gt()?, stride, pad, output_pad)?;
                self.send(grads, x, gx.into_data());
                self.send(grads, w, gw.into_data());
                if let Some(b) = b {
                    self.send(grads, b, gb.into_data());
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gx[src] = gx[src] + gv;
                }
                self.send(grads, *x, gx);
            }
            &Op::Relu(x) => {
                let d = self.value(x).data().iter().zip(g).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
                self.send(grads, x, d);
            }
            &Op::Softplus(x) => {
                let d = self.value(x).data().iter().zip(g).map(|(&v, &gv)| gv * kernels::sigmoid(v)).collect();
                self.send(grads, x, d);
            }
            &Op::Sigmoid(x) => {
                let d = node.value.data().iter().zip(g).map(|(&y, &gv)| gv * y * (T::one() - y)).collect();
                self.send(grads, x, d);
            }
            &Op::Softmax(x) => {
                let row = *node.value.shape().last().unwrap();
                let mut d = Vec::with_capacity(g.len());
                for (y, gr) in node.value.data().chunks(row).zip(g.chunks(row)) {
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    d.extend(y.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                self.send(grads, x, d);
            }
            &Op::Matmul { a, b } => self.backprop_matmul(a, b, &node.value, g, grads),
            &Op::Reshape(x) => self.send(grads, x, g.to_vec()),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                self.send(grads, *x, permute_tensor(&gt()?, &inverse).into_data());
            }
            &Op::Binary { kind, a, b } => self.backprop_binary(kind, a, b, &node.value, g, grads),
            &Op::Scale { x, s } => self.send(grads, x, g.iter().map(|&v| v * s).collect()),
            &Op::AddScalar(x) => self.send(grads, x, g.to_vec()),
            &Op::SumAxis { x, axis } => {
                let shape = self.shape(x);
                let (outer, ext, inner) = axis_split(shape, axis);
                let mut d = Vec::with_capacity(outer * ext * inner);
                for o in 0..outer {
                    for _ in 0..ext {
                        d.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.send(grads, x, d);
            }
            &Op::SumAll(x) => self.send(grads, x, vec![g[0]; self.value(x).len()]),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.shape(v)[*axis];
                    let mut d = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + ext * inner]);
                    }
                    offset += ext;
                    self.send(grads, v, d);
                }
            }
            &Op::Narrow { x, axis, start } => {
                let (outer, ext, inner) = axis_split(self.shape(x), axis);
                let len = node.value.shape()[axis];
                let mut d = vec![T::zero(); outer * ext * inner];
                for o in 0..outer {
                    let base = (o * ext + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.send(grads, x, d);
            }
            Op::BceWithLogits { x, target } => {
                let n = T::lit(target.len() as f64);
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&v, &y)| g[0] * (kernels::sigmoid(v) - y) / n)
                    .collect();
                self.send(grads, *x, d);
            }
        }
        Ok(())
    }

    fn backprop_matmul(&self, a: Var, b: Var, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ba, m, k) = split_matmul(ta.shape()).unwrap();
        let (bb, _, n) = split_matmul(tb.shape()).unwrap();
        let nb = out.len() / (m * n).max(1);
        let (sa, sb) = (if ba.is_empty() { 0 } else { m * k }, if bb.is_empty() { 0 } else { k * n });
        if self.wants(a) {
            let mut ga = vec![T::zero(); ta.len()];
            for i in 0..nb {
                kernels::gemm_nt(m, n, k, &g[i * m * n..(i + 1) * m * n], &tb.data()[i * sb..i * sb + k * n], &mut ga[i * sa..i * sa + m * k]);
            }
            self.send(grads, a, ga);
        }
        if self.wants(b) {
            let mut gb = vec![T::zero(); tb.len()];
            for i in 0..nb {
                kernels::gemm_tn(k, m, n, &ta.data()[i * sa..i * sa + m * k], &g[i * m * n..(i + 1) * m * n], &mut gb[i * sb..i * sb + k * n]);
            }
            self.send(grads, b, gb);
        }
    }

    fn backprop_binary(&self, kind: Binary, a: Var, b: Var, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = out.shape();
        let oa = broadcast_offsets(ta.shape(), shape);
        let ob = broadcast_offsets(tb.shape(), shape);
        if self.wants(a) {
            let mut ga = vec![T::zero(); ta.len()];
            for (idx, &gv) in g.iter().enumerate() {
                let d = match kind {
                    Binary::Add | Binary::Sub => gv,
                    Binary::Mul => gv * tb.data()[ob[idx]],
                    Binary::Div => gv / tb.data()[ob[idx]],
                };
                ga[oa[idx]] = ga[oa[idx]] + d;
            }
            self.send(grads, a, ga);
        }
        if self.wants(b) {
            let mut gb = vec![T::zero(); tb.len()];
            for (idx, &gv) in g.iter().enumerate() {
                let d = match kind {
                    Binary::Add => gv,
                    Binary::Sub => -gv,
                    Binary::Mul => gv * ta.data()[oa[idx]],
                    Binary::Div => {
                        let y = tb.data()[ob[idx]];
                        -gv * ta.data()[oa[idx]] / (y * y)
                    }
                };
                gb[ob[idx]] = gb[ob[idx]] + d;
            }
            self.send(grads, b, gb);
        }
    }

    /// Name of the op that produced `v` (for diagnostics).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_tensor<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_strides = strides(t.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
    let src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.len();
    let mut idx = vec![0usize; axes.len()];
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src).map(|(i, s)| i * s).sum();
        data.push(t.data()[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permutation preserves element count")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn matmul_inner_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(vec![2, 3])).unwrap();
        let b = g.constant(Tensor::<f64>::zeros(vec![4, 2])).unwrap();
        let e = g.matmul(a, b).unwrap_err().to_string();
        assert!(e.contains("inner dimensions"), "{e}");
    }

    #[test]
    fn backward_only_touches_requires_grad_leaves() {
        let mut g = Graph::new();
        let p = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let c = g.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let unused = g.param(t(&[3], &[0.0; 3])).unwrap();
        let m = g.mul(p, c).unwrap();
        let s = g.sum_all(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn broadcast_div_grad() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = g.param(t(&[2, 1], &[2.0, 4.0])).unwrap();
        let y = g.div(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 1.0, 0.75, 1.0]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0.5, 0.5, 0.25, 0.25]);
        assert_eq!(g.grad(b).unwrap().data(), &[-3.0 / 4.0, -7.0 / 16.0]);
    }

    #[test]
    fn permute_and_concat_narrow() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![2, 3], |i| i as f64)).unwrap();
        let y = g.transpose(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let c = g.concat(&[x, x], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 6]);
        let n = g.narrow(c, 1, 2, 2).unwrap();
        assert_eq!(g.value(n).data(), &[2.0, 0.0, 5.0, 3.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[1.0])).unwrap();
        let z = g.constant(t(&[1], &[0.0])).unwrap();
        assert!(matches!(g.div(a, z), Err(Error::Numeric(_))));
        assert!(g.constant(t(&[1], &[f64::NAN])).is_err());
    }

    #[test]
    fn softmax_only_last_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(vec![2, 4])).unwrap();
        assert!(g.softmax(x, 0).is_err());
        let y = g.softmax(x, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.25));
    }
}
