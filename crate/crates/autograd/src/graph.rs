//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Var`] is a cheap handle into the tape; calling [`Var::backward`] on a
//! scalar walks the tape in reverse and returns the gradients of every node
//! that requires one. Nodes only require a gradient when some ancestor leaf
//! does, so frozen sub-networks cost a forward pass only.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// User-defined differentiable operation.
///
/// `backward` receives the forward inputs, the forward output and the
/// incoming gradient, and returns one optional gradient per input.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    Powf(usize, T),
    Square(usize),
    Abs(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    LeakyRelu { x: usize, slope: T, gain: T },
    Clamp { x: usize, lo: T, hi: T },
    AddBias { x: usize, b: usize },
    ScaleChannels { x: usize, s: usize },
    ScaleSpatial { x: usize, m: usize },
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    Linear { x: usize, w: usize },
    Upsample2x(usize),
    AvgPool2x(usize),
    Concat { parts: Vec<usize>, axis: usize },
    SliceRows { x: usize, start: usize },
    Reshape(usize),
    BroadcastRows(usize),
    SumAll(usize),
    MeanAll(usize),
    SumLastAxis(usize),
    MeanPerSample(usize),
    RowNormalize { x: usize, eps: T },
    RowDot(usize, usize),
    CrossEntropy { logits: usize, labels: Vec<usize>, margin: T, scale: T },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording tape. Create one per forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant input: no gradient is accumulated for it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn custom(
        &self,
        inputs: &[Var<'_, T>],
        output: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Var<'_, T> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.any_requires_grad(&ids);
        self.push(output, Op::Custom { inputs: ids, op }, rg)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn any_requires_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, x: usize, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let rg = self.requires_grad(x);
        self.push(value, op, rg)
    }

    fn binary(&self, a: usize, b: usize, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let rg = self.any_requires_grad(&[a, b]);
        self.push(value, op, rg)
    }

    /// Reverse pass from `root`, seeded with ones of the root's shape.
    fn backward(&self, root: usize) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root] = Some(Tensor::ones(nodes[root].value.shape()));
        for id in (0..=root).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&nodes, id, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        nodes: &[Node<T>],
        id: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
        let wants = |i: usize| nodes[i].requires_grad;
        let out = &nodes[id].value;
        let mut acc = |i: usize, t: Tensor<T>| {
            if !nodes[i].requires_grad {
                return;
            }
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if wants(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.zip_map(val(*b), |gv, bv| gv * bv)?);
                }
                if wants(*b) {
                    acc(*b, g.zip_map(val(*a), |gv, av| gv * av)?);
                }
            }
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::MulScalar(x, c) => {
                let c = *c;
                acc(*x, g.map(|v| v * c));
            }
            Op::Powf(x, p) => {
                let p = *p;
                let d = val(*x).zip_map(g, |xv, gv| gv * p * xv.powf(p - T::one()))?;
                acc(*x, d);
            }
            Op::Square(x) => {
                let two = T::from_f64(2.0);
                acc(*x, val(*x).zip_map(g, |xv, gv| two * xv * gv)?);
            }
            Op::Abs(x) => {
                acc(
                    *x,
                    val(*x).zip_map(g, |xv, gv| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })?,
                );
            }
            Op::Log(x) => acc(*x, val(*x).zip_map(g, |xv, gv| gv / xv)?),
            Op::Tanh(x) => acc(*x, out.zip_map(g, |y, gv| gv * (T::one() - y * y))?),
            Op::Sigmoid(x) => acc(*x, out.zip_map(g, |y, gv| gv * y * (T::one() - y))?),
            Op::Softplus(x) => acc(*x, val(*x).zip_map(g, |xv, gv| gv * sigmoid(xv))?),
            Op::LeakyRelu { x, slope, gain } => {
                let (slope, gain) = (*slope, *gain);
                acc(
                    *x,
                    val(*x).zip_map(g, |xv, gv| {
                        if xv > T::zero() {
                            gv * gain
                        } else {
                            gv * gain * slope
                        }
                    })?,
                );
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    *x,
                    val(*x).zip_map(g, |xv, gv| if xv > lo && xv < hi { gv } else { T::zero() })?,
                );
            }
            Op::AddBias { x, b } => {
                acc(*x, g.clone());
                if wants(*b) {
                    let c = val(*b).numel();
                    let mut db = vec![T::zero(); c];
                    for_each_channel(g.shape(), |n_c, range| {
                        db[n_c % c] += g.data()[range].iter().copied().sum::<T>();
                    });
                    acc(*b, Tensor::new(val(*b).shape(), db)?);
                }
            }
            Op::ScaleChannels { x, s } => {
                let (xv, sv) = (val(*x), val(*s));
                if wants(*x) {
                    let mut dx = g.clone();
                    for_each_channel(g.shape(), |nc, range| {
                        let sc = sv.data()[nc];
                        dx.data_mut()[range].iter_mut().for_each(|v| *v *= sc);
                    });
                    acc(*x, dx);
                }
                if wants(*s) {
                    let mut ds = vec![T::zero(); sv.numel()];
                    for_each_channel(g.shape(), |nc, range| {
                        ds[nc] = g.data()[range.clone()]
                            .iter()
                            .zip(&xv.data()[range])
                            .map(|(&a, &b)| a * b)
                            .sum();
                    });
                    acc(*s, Tensor::new(sv.shape(), ds)?);
                }
            }
            Op::ScaleSpatial { x, m } => {
                let (xv, mv) = (val(*x), val(*m));
                let (n, c, h, w) = xv.dims4()?;
                let plane = h * w;
                if wants(*x) {
                    let mut dx = g.clone();
                    for b in 0..n {
                        let mp = &mv.data()[b * plane..(b + 1) * plane];
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            for (d, &mm) in dx.data_mut()[off..off + plane].iter_mut().zip(mp) {
                                *d *= mm;
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if wants(*m) {
                    let mut dm = vec![T::zero(); mv.numel()];
                    for b in 0..n {
                        let dmp = &mut dm[b * plane..(b + 1) * plane];
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let gp = &g.data()[off..off + plane];
                            let xp = &xv.data()[off..off + plane];
                            for i in 0..plane {
                                dmp[i] += gp[i] * xp[i];
                            }
                        }
                    }
                    acc(*m, Tensor::new(mv.shape(), dm)?);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (dx, dw) =
                    kernels::conv2d_backward(val(*x), val(*w), g, *stride, *pad, wants(*x), wants(*w))?;
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
            }
            Op::Linear { x, w } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, i) = xv.dims2()?;
                let (o, _) = wv.dims2()?;
                if wants(*x) {
                    // dx (n x i) = g (n x o) * W (o x i)
                    let mut dx = vec![T::zero(); n * i];
                    unsafe {
                        T::gemm(n, o, i, T::one(), g.data().as_ptr(), o as isize, 1, wv.data().as_ptr(), i as isize, 1, T::zero(), dx.as_mut_ptr(), i as isize, 1);
                    }
                    acc(*x, Tensor::new(&[n, i], dx)?);
                }
                if wants(*w) {
                    // dW (o x i) = g^T (o x n) * x (n x i)
                    let mut dw = vec![T::zero(); o * i];
                    unsafe {
                        T::gemm(o, n, i, T::one(), g.data().as_ptr(), 1, o as isize, xv.data().as_ptr(), i as isize, 1, T::zero(), dw.as_mut_ptr(), i as isize, 1);
                    }
                    acc(*w, Tensor::new(&[o, i], dw)?);
                }
            }
            Op::Upsample2x(x) => acc(*x, kernels::upsample2x_backward(g)?),
            Op::AvgPool2x(x) => acc(*x, kernels::avg_pool2x_backward(g)?),
            Op::Concat { parts, axis } => {
                let outer: usize = g.shape()[..*axis].iter().product();
                let inner: usize = g.shape()[*axis + 1..].iter().product();
                let total = g.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let chunk = pv.shape()[*axis] * inner;
                    if wants(p) {
                        let mut dp = Vec::with_capacity(pv.numel());
                        for o in 0..outer {
                            dp.extend_from_slice(&g.data()[o * total + offset..o * total + offset + chunk]);
                        }
                        acc(p, Tensor::new(pv.shape(), dp)?);
                    }
                    offset += chunk;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let per = xv.numel() / xv.shape()[0];
                let mut dx = Tensor::zeros(xv.shape());
                dx.data_mut()[start * per..start * per + g.numel()].copy_from_slice(g.data());
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(val(*x).shape())?),
            Op::BroadcastRows(x) => {
                let d = val(*x).numel();
                let mut dx = vec![T::zero(); d];
                for row in g.data().chunks(d) {
                    for (a, &b) in dx.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                acc(*x, Tensor::new(val(*x).shape(), dx)?);
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::full(val(*x).shape(), gv));
            }
            Op::MeanAll(x) => {
                let xv = val(*x);
                let gv = g.data()[0] / T::from_f64(xv.numel() as f64);
                acc(*x, Tensor::full(xv.shape(), gv));
            }
            Op::SumLastAxis(x) => {
                let xv = val(*x);
                let k = *xv.shape().last().unwrap();
                let mut dx = Vec::with_capacity(xv.numel());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat(gv).take(k));
                }
                acc(*x, Tensor::new(xv.shape(), dx)?);
            }
            Op::MeanPerSample(x) => {
                let xv = val(*x);
                let n = xv.shape()[0];
                let per = xv.numel() / n;
                let scale = T::one() / T::from_f64(per as f64);
                let mut dx = Vec::with_capacity(xv.numel());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat(gv * scale).take(per));
                }
                acc(*x, Tensor::new(xv.shape(), dx)?);
            }
            Op::RowNormalize { x, eps } => {
                // y = x / sqrt(|x|^2 + eps); dx = (g - y <g, y>) / sqrt(|x|^2 + eps)
                let xv = val(*x);
                let (n, d) = xv.dims2()?;
                let mut dx = vec![T::zero(); n * d];
                for r in 0..n {
                    let xr = &xv.data()[r * d..(r + 1) * d];
                    let yr = &out.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let norm = (xr.iter().map(|&v| v * v).sum::<T>() + *eps).sqrt();
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                acc(*x, Tensor::new(&[n, d], dx)?);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, d) = av.dims2()?;
                let scale_rows = |src: &Tensor<T>| -> Result<Tensor<T>> {
                    let mut t = src.clone();
                    for r in 0..n {
                        let gv = g.data()[r];
                        t.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= gv);
                    }
                    Ok(t)
                };
                if wants(*a) {
                    acc(*a, scale_rows(bv)?);
                }
                if wants(*b) {
                    acc(*b, scale_rows(av)?);
                }
            }
            Op::CrossEntropy { logits, labels, margin, scale } => {
                let lv = val(*logits);
                let (n, c) = lv.dims2()?;
                let gv = g.data()[0] / T::from_f64(n as f64);
                let mut dl = vec![T::zero(); n * c];
                for r in 0..n {
                    let row = margin_row(&lv.data()[r * c..(r + 1) * c], labels[r], *margin, *scale);
                    let probs = softmax(&row);
                    for j in 0..c {
                        let target = if j == labels[r] { T::one() } else { T::zero() };
                        dl[r * c + j] = gv * *scale * (probs[j] - target);
                    }
                }
                acc(*logits, Tensor::new(&[n, c], dl)?);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
                let grads_in = op.backward(&ins, out, g);
                for (&i, d) in inputs.iter().zip(grads_in) {
                    if let Some(d) = d {
                        if d.shape() != val(i).shape() {
                            return Err(Error::ShapeMismatch {
                                op: op.name(),
                                expected: val(i).shape().to_vec(),
                                got: d.shape().to_vec(),
                            });
                        }
                        acc(i, d);
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn margin_row<T: Scalar>(row: &[T], label: usize, margin: T, scale: T) -> Vec<T> {
    row.iter()
        .enumerate()
        .map(|(j, &v)| if j == label { scale * (v - margin) } else { scale * v })
        .collect()
}

fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Calls `f(n * C + c, range)` for each (sample, channel) plane of an
/// `[N, C, ...]` tensor, where `range` indexes that plane's elements.
fn for_each_channel(shape: &[usize], mut f: impl FnMut(usize, std::ops::Range<usize>)) {
    let (n, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    for nc in 0..n * c {
        f(nc, nc * plane..(nc + 1) * plane);
    }
}

/// Gradients produced by a reverse pass.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

fn same_graph<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(
        std::ptr::eq(a.graph, b.graph),
        "vars from different graphs cannot be combined"
    );
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    /// Copy of this value as a new constant leaf.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }

    pub fn backward(&self) -> Result<Gradients<T>> {
        let v = self.value();
        if v.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward (expects a scalar)",
                expected: vec![1],
                got: v.shape().to_vec(),
            });
        }
        self.graph.backward(self.id)
    }

    fn elementwise(
        &self,
        other: &Var<'g, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        node: Op<T>,
    ) -> Result<Var<'g, T>> {
        same_graph(self, other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op,
                expected: a.shape().to_vec(),
                got: b.shape().to_vec(),
            });
        }
        let out = a.zip_map(&b, f)?;
        Ok(self.graph.binary(self.id, other.id, out, node))
    }

    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g, T> {
        let c = T::from_f64(c);
        let out = self.value().map(|v| v + c);
        self.graph.unary(self.id, out, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(&self, c: f64) -> Var<'g, T> {
        let c = T::from_f64(c);
        let out = self.value().map(|v| v * c);
        self.graph.unary(self.id, out, Op::MulScalar(self.id, c))
    }

    pub fn neg(&self) -> Var<'g, T> {
        self.mul_scalar(-1.0)
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Var<'g, T> {
        self.neg().add_scalar(1.0)
    }

    pub fn powf(&self, p: f64) -> Var<'g, T> {
        let p = T::from_f64(p);
        let out = self.value().map(|v| v.powf(p));
        self.graph.unary(self.id, out, Op::Powf(self.id, p))
    }

    pub fn square(&self) -> Var<'g, T> {
        let out = self.value().map(|v| v * v);
        self.graph.unary(self.id, out, Op::Square(self.id))
    }

    pub fn abs(&self) -> Var<'g, T> {
        let out = self.value().map(|v| v.abs());
        self.graph.unary(self.id, out, Op::Abs(self.id))
    }

    pub fn log(&self) -> Var<'g, T> {
        let out = self.value().map(|v| v.ln());
        self.graph.unary(self.id, out, Op::Log(self.id))
    }

    pub fn tanh(&self) -> Var<'g, T> {
        let out = self.value().map(|v| v.tanh());
        self.graph.unary(self.id, out, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        let out = self.value().map(sigmoid);
        self.graph.unary(self.id, out, Op::Sigmoid(self.id))
    }

    pub fn softplus(&self) -> Var<'g, T> {
        let out = self.value().map(softplus);
        self.graph.unary(self.id, out, Op::Softplus(self.id))
    }

    /// `gain * leaky_relu(x, slope)`.
    pub fn leaky_relu(&self, slope: f64, gain: f64) -> Var<'g, T> {
        let (slope, gain) = (T::from_f64(slope), T::from_f64(gain));
        let out = self
            .value()
            .map(|v| if v > T::zero() { v * gain } else { v * slope * gain });
        self.graph
            .unary(self.id, out, Op::LeakyRelu { x: self.id, slope, gain })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'g, T> {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let out = self.value().map(|v| v.max(lo).min(hi));
        self.graph.unary(self.id, out, Op::Clamp { x: self.id, lo, hi })
    }

    /// Adds `b[C]` along axis 1 of an `[N, C, ...]` tensor.
    pub fn add_bias(&self, b: &Var<'g, T>) -> Result<Var<'g, T>> {
        same_graph(self, b);
        let (x, bv) = (self.value(), b.value());
        if x.rank() < 2 || bv.numel() != x.dim(1) {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                expected: vec![x.shape().get(1).copied().unwrap_or(0)],
                got: bv.shape().to_vec(),
            });
        }
        let c = bv.numel();
        let mut out = (*x).clone();
        for_each_channel(x.shape(), |nc, range| {
            let bias = bv.data()[nc % c];
            out.data_mut()[range].iter_mut().for_each(|v| *v += bias);
        });
        Ok(self.graph.binary(self.id, b.id, out, Op::AddBias { x: self.id, b: b.id }))
    }

    /// Multiplies an `[N, C, ...]` tensor by per-sample, per-channel
    /// factors `s[N, C]`.
    pub fn scale_channels(&self, s: &Var<'g, T>) -> Result<Var<'g, T>> {
        same_graph(self, s);
        let (x, sv) = (self.value(), s.value());
        if x.rank() < 2 || sv.shape() != &x.shape()[..2] {
            return Err(Error::ShapeMismatch {
                op: "scale_channels",
                expected: x.shape()[..2.min(x.rank())].to_vec(),
                got: sv.shape().to_vec(),
            });
        }
        let mut out = (*x).clone();
        for_each_channel(x.shape(), |nc, range| {
            let sc = sv.data()[nc];
            out.data_mut()[range].iter_mut().for_each(|v| *v *= sc);
        });
        Ok(self
            .graph
            .binary(self.id, s.id, out, Op::ScaleChannels { x: self.id, s: s.id }))
    }

    /// Multiplies `[N, C, H, W]` by a one-channel map `m[N, 1, H, W]`
    /// broadcast across channels.
    pub fn scale_spatial(&self, m: &Var<'g, T>) -> Result<Var<'g, T>> {
        same_graph(self, m);
        let (x, mv) = (self.value(), m.value());
        let (n, c, h, w) = x.dims4()?;
        if mv.shape() != [n, 1, h, w] {
            return Err(Error::ShapeMismatch {
                op: "scale_spatial",
                expected: vec![n, 1, h, w],
                got: mv.shape().to_vec(),
            });
        }
        let plane = h * w;
        let mut out = (*x).clone();
        for b in 0..n {
            let mp = &mv.data()[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for (o, &mm) in out.data_mut()[off..off + plane].iter_mut().zip(mp) {
                    *o *= mm;
                }
            }
        }
        Ok(self
            .graph
            .binary(self.id, m.id, out, Op::ScaleSpatial { x: self.id, m: m.id }))
    }

    /// 2-D cross-correlation with `w[Co, Ci, kh, kw]`, zero padding.
    pub fn conv2d(&self, w: &Var<'g, T>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        same_graph(self, w);
        let out = kernels::conv2d_forward(&self.value(), &w.value(), stride, pad)?;
        Ok(self.graph.binary(
            self.id,
            w.id,
            out,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                stride,
                pad,
            },
        ))
    }

    /// `x[N, I] * w[O, I]^T`.
    pub fn linear(&self, w: &Var<'g, T>) -> Result<Var<'g, T>> {
        same_graph(self, w);
        let (x, wv) = (self.value(), w.value());
        let (n, i) = x.dims2()?;
        let (o, wi) = wv.dims2()?;
        if wi != i {
            return Err(Error::ShapeMismatch {
                op: "linear",
                expected: vec![o, i],
                got: vec![o, wi],
            });
        }
        let mut y = vec![T::zero(); n * o];
        unsafe {
            T::gemm(
                n,
                i,
                o,
                T::one(),
                x.data().as_ptr(),
                i as isize,
                1,
                wv.data().as_ptr(),
                1,
                i as isize,
                T::zero(),
                y.as_mut_ptr(),
                o as isize,
                1,
            );
        }
        let out = Tensor::new(&[n, o], y)?;
        Ok(self
            .graph
            .binary(self.id, w.id, out, Op::Linear { x: self.id, w: w.id }))
    }

    /// Bilinear 2x upsampling with half-pixel centers (corners not aligned).
    pub fn upsample2x(&self) -> Result<Var<'g, T>> {
        let out = kernels::upsample2x_forward(&self.value())?;
        Ok(self.graph.unary(self.id, out, Op::Upsample2x(self.id)))
    }

    pub fn avg_pool2x(&self) -> Result<Var<'g, T>> {
        let out = kernels::avg_pool2x_forward(&self.value())?;
        Ok(self.graph.unary(self.id, out, Op::AvgPool2x(self.id)))
    }

    /// Concatenation along `axis`; all other extents must match.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let graph = first.graph;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let ref_shape = values[0].shape().to_vec();
        if axis >= ref_shape.len() {
            return Err(Error::Invalid(format!("concat: axis {axis} out of range")));
        }
        let mut total_axis = 0;
        for (p, v) in parts.iter().zip(&values) {
            same_graph(first, p);
            let s = v.shape();
            if s.len() != ref_shape.len()
                || s[..axis] != ref_shape[..axis]
                || s[axis + 1..] != ref_shape[axis + 1..]
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    expected: ref_shape.clone(),
                    got: s.to_vec(),
                });
            }
            total_axis += s[axis];
        }
        let outer: usize = ref_shape[..axis].iter().product();
        let inner: usize = ref_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = ref_shape;
        shape[axis] = total_axis;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = graph.any_requires_grad(&ids);
        Ok(graph.push(Tensor::new(&shape, data)?, Op::Concat { parts: ids, axis }, rg))
    }

    /// Rows `start..start + len` along axis 0.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if start + len > x.shape()[0] {
            return Err(Error::Invalid(format!(
                "slice_rows: {start}+{len} exceeds {}",
                x.shape()[0]
            )));
        }
        let per = x.numel() / x.shape()[0];
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(&shape, x.data()[start * per..(start + len) * per].to_vec())?;
        Ok(self
            .graph
            .unary(self.id, out, Op::SliceRows { x: self.id, start }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.graph.unary(self.id, out, Op::Reshape(self.id)))
    }

    /// Repeats a `[1, ...]` tensor `n` times along axis 0.
    pub fn broadcast_rows(&self, n: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.shape()[0] != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                expected: vec![1],
                got: x.shape().to_vec(),
            });
        }
        let mut shape = x.shape().to_vec();
        shape[0] = n;
        let mut data = Vec::with_capacity(x.numel() * n);
        for _ in 0..n {
            data.extend_from_slice(x.data());
        }
        Ok(self
            .graph
            .unary(self.id, Tensor::new(&shape, data)?, Op::BroadcastRows(self.id)))
    }

    pub fn sum_all(&self) -> Var<'g, T> {
        let out = Tensor::scalar(self.value().sum());
        self.graph.unary(self.id, out, Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> Var<'g, T> {
        let out = Tensor::scalar(self.value().mean());
        self.graph.unary(self.id, out, Op::MeanAll(self.id))
    }

    /// Sums the last axis away.
    pub fn sum_last_axis(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let k = *x.shape().last().ok_or(Error::Empty("sum_last_axis"))?;
        let data: Vec<T> = x.data().chunks(k).map(|c| c.iter().copied().sum()).collect();
        let shape = if x.rank() > 1 {
            x.shape()[..x.rank() - 1].to_vec()
        } else {
            vec![1]
        };
        Ok(self
            .graph
            .unary(self.id, Tensor::new(&shape, data)?, Op::SumLastAxis(self.id)))
    }

    /// Mean over every axis but the first: `[N, ...] -> [N]`.
    pub fn mean_per_sample(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let n = x.shape()[0];
        let per = x.numel() / n;
        let inv = T::one() / T::from_f64(per as f64);
        let data: Vec<T> = x
            .data()
            .chunks(per)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self
            .graph
            .unary(self.id, Tensor::new(&[n], data)?, Op::MeanPerSample(self.id)))
    }

    /// Scales each row of `[N, D]` to unit L2 norm (`eps` inside the root).
    pub fn row_normalize(&self, eps: f64) -> Result<Var<'g, T>> {
        let x = self.value();
        let (n, d) = x.dims2()?;
        let eps = T::from_f64(eps);
        let mut out = (*x).clone();
        for r in 0..n {
            let row = &mut out.data_mut()[r * d..(r + 1) * d];
            let norm = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v = *v / norm);
        }
        Ok(self
            .graph
            .unary(self.id, out, Op::RowNormalize { x: self.id, eps }))
    }

    /// Row-wise dot products of two `[N, D]` tensors, giving `[N]`.
    pub fn row_dot(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        same_graph(self, other);
        let (a, b) = (self.value(), other.value());
        a.expect_same_shape(&b, "row_dot")?;
        let (n, d) = a.dims2()?;
        let data: Vec<T> = (0..n)
            .map(|r| {
                a.data()[r * d..(r + 1) * d]
                    .iter()
                    .zip(&b.data()[r * d..(r + 1) * d])
                    .map(|(&x, &y)| x * y)
                    .sum()
            })
            .collect();
        Ok(self
            .graph
            .binary(self.id, other.id, Tensor::new(&[n], data)?, Op::RowDot(self.id, other.id)))
    }

    /// Mean softmax cross-entropy over rows of `[N, C]` logits, with an
    /// additive margin subtracted from each target logit before scaling.
    pub fn cross_entropy(&self, labels: &[usize], margin: f64, scale: f64) -> Result<Var<'g, T>> {
        let x = self.value();
        let (n, c) = x.dims2()?;
        if labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(Error::Invalid(format!(
                "cross_entropy: {} labels for {n} rows of {c} classes",
                labels.len()
            )));
        }
        let (margin, scale) = (T::from_f64(margin), T::from_f64(scale));
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = margin_row(&x.data()[r * c..(r + 1) * c], label, margin, scale);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[label];
        }
        let out = Tensor::scalar(loss / T::from_f64(n as f64));
        Ok(self.graph.unary(
            self.id,
            out,
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                margin,
                scale,
            },
        ))
    }
}
