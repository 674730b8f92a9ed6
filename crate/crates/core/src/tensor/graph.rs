use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use super::conv::{self, ConvGeom};
use super::pool::{self, PoolGeom};
use super::{concat_kernel, concat_shape, gemm, loss, resize, Element, Tensor};
use crate::error::{Error, Result};

/// Operation tape. Nodes are stored in creation order, which is a valid
/// topological order; [`Graph::backward`] replays it in reverse.
///
/// A graph is confined to one thread (it is `!Sync`), but the values it holds
/// are `Arc`-shared with whatever created them.
pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<Vec<Option<Vec<T>>>>,
}

struct Node<T: Element> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

enum Op<T: Element> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Mean(usize),
    Relu(usize),
    Sigmoid(usize),
    Reshape(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Concat(Vec<usize>),
    Slice {
        input: usize,
        start: usize,
        len: usize,
    },
    Resize {
        input: usize,
        planes: usize,
        from: (usize, usize),
        to: (usize, usize),
    },
    SmoothL1 {
        pred: usize,
        target: Vec<T>,
        weights: Vec<T>,
        sides: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
        classes: usize,
    },
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Element> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a shared tensor as a leaf; it participates in
    /// differentiation iff the tensor requires grad.
    pub fn leaf(&self, tensor: Arc<Tensor<T>>) -> Var<'_, T> {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, requires_grad, Op::Leaf)
    }

    pub fn variable(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(tensor))
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.push(Arc::new(tensor), false, Op::Leaf)
    }

    pub fn constant_shared(&self, tensor: Arc<Tensor<T>>) -> Var<'_, T> {
        self.push(tensor, false, Op::Leaf)
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let grads = self.leaf_grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        Tensor::new(var.shape(), g.clone()).ok()
    }

    pub fn zero_grads(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Back-propagates from a scalar `loss`. Leaf gradients accumulate across
    /// calls; intermediate gradients do not persist.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![T::one()]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize(nodes.len(), None);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                add_into(&mut leaf_grads[id], g);
                continue;
            }
            for (operand, dg) in backward_op(node, &g, &nodes) {
                add_into(&mut grads[operand], dg);
            }
        }
        Ok(())
    }

    /// Channel concatenation, parts kept in argument order.
    pub fn concat_channels<'g>(&'g self, parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let values: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let shapes: Vec<&[usize]> = values.iter().map(|v| v.shape()).collect();
        let out_shape = concat_shape(&shapes)?;
        let datas: Vec<&[T]> = values.iter().map(|v| v.data()).collect();
        let data = concat_kernel(&shapes, &datas, &out_shape);
        let requires_grad = parts.iter().any(|p| p.requires_grad());
        Ok(self.push_new(
            Tensor::new(out_shape, data)?,
            requires_grad,
            Op::Concat(parts.iter().map(|p| p.id).collect()),
        ))
    }

    fn push(&self, value: Arc<Tensor<T>>, requires_grad: bool, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push_new(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var<'_, T> {
        self.push(Arc::new(value), requires_grad, op)
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

fn add_into<T: Element>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<'g, T: Element> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    fn same_graph(&self, other: &Var<'g, T>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::invalid("operands belong to different graphs"))
        }
    }

    fn binary(
        self,
        other: Var<'g, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'g, T>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .graph
            .push_new(Tensor::new(a.shape().to_vec(), data)?, rg, op))
    }

    fn unary(self, f: impl Fn(T) -> T, op: Op<T>) -> Var<'g, T> {
        let a = self.value();
        let data = a.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.graph.push_new(value, self.requires_grad(), op)
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, factor: T) -> Var<'g, T> {
        self.unary(|x| x * factor, Op::Scale(self.id, factor))
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(|x| if x > T::zero() { x } else { T::zero() }, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(|x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(self.id))
    }

    pub fn sum(self) -> Var<'g, T> {
        let total = self.value().data().iter().copied().sum();
        self.graph
            .push_new(Tensor::scalar(total), self.requires_grad(), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g, T> {
        let v = self.value();
        let total: T = v.data().iter().copied().sum();
        let mean = total / T::of(v.numel() as f64);
        self.graph
            .push_new(Tensor::scalar(mean), self.requires_grad(), Op::Mean(self.id))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, T>> {
        let v = self.value();
        let shape = shape.into();
        let value = Tensor::new(shape.clone(), v.data().to_vec())
            .map_err(|_| Error::shape("reshape", v.shape(), &shape))?;
        Ok(self
            .graph
            .push_new(value, self.requires_grad(), Op::Reshape(self.id)))
    }

    /// Flattens all but the leading (batch) axis.
    pub fn flatten(self) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let rest: usize = shape[1..].iter().product();
        self.reshape(vec![shape[0], rest])
    }

    /// 2-D convolution with square kernels, zero padding and a per-channel
    /// bias.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Var<'g, T>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g, T>> {
        self.same_graph(&weight)?;
        self.same_graph(&bias)?;
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let geom = ConvGeom::new(x.shape(), w.shape(), b.shape(), stride, padding)?;
        let (out, cols) = conv::forward(x.data(), w.data(), b.data(), &geom);
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        Ok(self.graph.push_new(
            Tensor::new(geom.out_shape(), out)?,
            rg,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                geom,
                // Weight gradients need the unfolded input; constant weights don't.
                cols: if weight.requires_grad() { cols } else { Vec::new() },
            },
        ))
    }

    pub fn max_pool2d(self, kernel: usize, stride: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let geom = PoolGeom::new(x.shape(), kernel, stride)?;
        let (out, argmax) = pool::forward(x.data(), &geom);
        Ok(self.graph.push_new(
            Tensor::new(geom.out_shape(), out)?,
            self.requires_grad(),
            Op::MaxPool {
                input: self.id,
                argmax,
            },
        ))
    }

    /// `x·Wᵀ + b` for `x: N×F`, `W: O×F`, `b: O`.
    pub fn linear(self, weight: Var<'g, T>, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&weight)?;
        self.same_graph(&bias)?;
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (n, f, o) = match (x.shape(), w.shape(), b.shape()) {
            ([n, f], [o, fw], [ob]) if f == fw && o == ob => (*n, *f, *o),
            _ => return Err(Error::shape("linear", x.shape(), w.shape())),
        };
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        gemm(n, f, o, x.data(), false, w.data(), true, &mut out, true);
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        Ok(self.graph.push_new(
            Tensor::new(vec![n, o], out)?,
            rg,
            Op::Linear {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
            },
        ))
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let value = self.value().slice_channels(start, len)?;
        Ok(self.graph.push_new(
            value,
            self.requires_grad(),
            Op::Slice {
                input: self.id,
                start,
                len,
            },
        ))
    }

    /// Bilinear resampling of each plane (half-pixel centres, edge clamp).
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let [n, c, h, w] = x.dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize_bilinear: output extents must be positive"));
        }
        let out = resize::forward(x.data(), n * c, (h, w), (out_h, out_w));
        Ok(self.graph.push_new(
            Tensor::new(vec![n, c, out_h, out_w], out)?,
            self.requires_grad(),
            Op::Resize {
                input: self.id,
                planes: n * c,
                from: (h, w),
                to: (out_h, out_w),
            },
        ))
    }

    /// Smooth-L1 over `M×S` predictions against a constant target, each row
    /// weighted by `weights[m]` and the sum divided by `S·M`. Zero-weight rows
    /// contribute neither value nor gradient.
    pub fn smooth_l1(self, target: &Tensor<T>, weights: &[T]) -> Result<Var<'g, T>> {
        let pred = self.value();
        let (m, s) = match pred.shape() {
            [m, s] => (*m, *s),
            other => return Err(Error::shape("smooth_l1", other, target.shape())),
        };
        if target.shape() != pred.shape() {
            return Err(Error::shape("smooth_l1", pred.shape(), target.shape()));
        }
        if weights.len() != m {
            return Err(Error::shape("smooth_l1 weights", pred.shape(), &[weights.len()]));
        }
        let value = loss::smooth_l1_forward(pred.data(), target.data(), weights, s);
        Ok(self.graph.push_new(
            Tensor::scalar(value),
            self.requires_grad(),
            Op::SmoothL1 {
                pred: self.id,
                target: target.data().to_vec(),
                weights: weights.to_vec(),
                sides: s,
            },
        ))
    }

    /// Mean cross-entropy of `N×C` logits against class labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'g, T>> {
        let logits = self.value();
        let (n, c) = match logits.shape() {
            [n, c] => (*n, *c),
            other => return Err(Error::shape("cross_entropy", other, &[labels.len()])),
        };
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", logits.shape(), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!(
                "cross_entropy: label {bad} outside 0..{c}"
            )));
        }
        let (value, probs) = loss::cross_entropy_forward(logits.data(), labels, c);
        Ok(self.graph.push_new(
            Tensor::scalar(value),
            self.requires_grad(),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
                classes: c,
            },
        ))
    }
}

fn backward_op<T: Element>(node: &Node<T>, g: &[T], nodes: &[Node<T>]) -> Vec<(usize, Vec<T>)> {
    let needs = |id: usize| nodes[id].requires_grad;
    let val = |id: usize| &nodes[id].value;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &id in [a, b] {
                if needs(id) {
                    out.push((id, g.to_vec()));
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                out.push((*a, g.to_vec()));
            }
            if needs(*b) {
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let other = val(*b).data();
                out.push((*a, g.iter().zip(other).map(|(&x, &y)| x * y).collect()));
            }
            if needs(*b) {
                let other = val(*a).data();
                out.push((*b, g.iter().zip(other).map(|(&x, &y)| x * y).collect()));
            }
        }
        Op::Scale(a, factor) => {
            if needs(*a) {
                out.push((*a, g.iter().map(|&v| v * *factor).collect()));
            }
        }
        Op::Sum(a) => {
            if needs(*a) {
                out.push((*a, vec![g[0]; val(*a).numel()]));
            }
        }
        Op::Mean(a) => {
            if needs(*a) {
                let n = val(*a).numel();
                out.push((*a, vec![g[0] / T::of(n as f64); n]));
            }
        }
        Op::Relu(a) => {
            if needs(*a) {
                let x = val(*a).data();
                out.push((
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                ));
            }
        }
        Op::Sigmoid(a) => {
            if needs(*a) {
                let y = node.value.data();
                out.push((
                    *a,
                    g.iter()
                        .zip(y)
                        .map(|(&d, &s)| d * s * (T::one() - s))
                        .collect(),
                ));
            }
        }
        Op::Reshape(a) => {
            if needs(*a) {
                out.push((*a, g.to_vec()));
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => {
            let grads = conv::backward(
                g,
                val(*weight).data(),
                cols,
                geom,
                [needs(*input), needs(*weight), needs(*bias)],
            );
            if let Some(dx) = grads.input {
                out.push((*input, dx));
            }
            if let Some(dw) = grads.weight {
                out.push((*weight, dw));
            }
            if let Some(db) = grads.bias {
                out.push((*bias, db));
            }
        }
        Op::MaxPool { input, argmax } => {
            if needs(*input) {
                out.push((*input, pool::backward(g, argmax, val(*input).numel())));
            }
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let (x, w) = (val(*input), val(*weight));
            let (n, f) = (x.shape()[0], x.shape()[1]);
            let o = w.shape()[0];
            if needs(*input) {
                let mut dx = vec![T::zero(); n * f];
                gemm(n, o, f, g, false, w.data(), false, &mut dx, false);
                out.push((*input, dx));
            }
            if needs(*weight) {
                let mut dw = vec![T::zero(); o * f];
                gemm(o, n, f, g, true, x.data(), false, &mut dw, false);
                out.push((*weight, dw));
            }
            if needs(*bias) {
                let mut db = vec![T::zero(); o];
                for row in g.chunks(o) {
                    db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
                out.push((*bias, db));
            }
        }
        Op::Concat(parts) => {
            let shape = node.value.shape();
            let (n, plane) = (shape[0], shape[2] * shape[3]);
            let total = shape[1] * plane;
            let mut offset = 0;
            for &p in parts {
                let chunk = val(p).shape()[1] * plane;
                if needs(p) {
                    let mut dp = Vec::with_capacity(n * chunk);
                    for b in 0..n {
                        let base = b * total + offset;
                        dp.extend_from_slice(&g[base..base + chunk]);
                    }
                    out.push((p, dp));
                }
                offset += chunk;
            }
        }
        Op::Slice { input, start, len } => {
            if needs(*input) {
                let shape = val(*input).shape();
                let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut dx = vec![T::zero(); n * c * plane];
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    let src = b * len * plane;
                    dx[dst..dst + len * plane].copy_from_slice(&g[src..src + len * plane]);
                }
                out.push((*input, dx));
            }
        }
        Op::Resize {
            input,
            planes,
            from,
            to,
        } => {
            if needs(*input) {
                out.push((*input, resize::backward(g, *planes, *from, *to)));
            }
        }
        Op::SmoothL1 {
            pred,
            target,
            weights,
            sides,
        } => {
            if needs(*pred) {
                out.push((
                    *pred,
                    loss::smooth_l1_backward(g[0], val(*pred).data(), target, weights, *sides),
                ));
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
            classes,
        } => {
            if needs(*logits) {
                out.push((
                    *logits,
                    loss::cross_entropy_backward(g[0], probs, labels, *classes),
                ));
            }
        }
    }
    out
}
