//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a Wengert tape: every operation evaluates eagerly, appends a
//! node holding its value and the recipe for its adjoint, and returns a
//! [`Var`] handle. [`Graph::backward`] walks the tape in reverse.

use crate::error::{Error, Result};
use crate::periodic_ops::{self as pops, Axis, PadMode};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to_shape, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Square,
    Abs,
    Recip,
    Sigmoid,
    Softplus,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Scale(f64),
    AddConst(f64),
    PowConst(f64),
    /// `x - softplus(k (x - 1)) / k`: a smooth upper clamp at 1.
    SoftClampMax(f64),
    /// `max(x, m)` with zero gradient below `m`.
    ClampMin(f64),
    /// `min(x, m)` with zero gradient above `m`.
    ClampMax(f64),
}

/// Recorded operation; the tape can be inspected after a forward pass.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    SumAll(Var),
    SumAxes(Var),
    Reshape(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, pad: PadMode },
    Filter { x: Var, taps: Vec<f64>, origin: usize, axis: Axis, pad: PadMode },
    ZeroStuff2x(Var),
    Decimate2x(Var),
    Roll { x: Var, dy: i64, dx: i64 },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
}

impl Op {
    /// Padding mode of operators that read spatial neighborhoods.
    pub fn spatial_padding(&self) -> Option<PadMode> {
        match self {
            Op::Conv2d { pad, .. } | Op::Filter { pad, .. } => Some(*pad),
            _ => None,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of leaves, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ops(&self) -> impl Iterator<Item = &Op> {
        self.nodes.iter().map(|n| &n.op)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(T::c(v)))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copy of a value cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // -- elementwise ----------------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = binary_forward(op, ta, tb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let out = self.value(a).map(|x| unary_forward(op, x));
        let rg = self.rg(a);
        self.push(out, Op::Unary(op, a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Ln, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sqrt, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Abs, a)
    }
    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Recip, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Softplus, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(UnaryOp::LeakyRelu(slope), a)
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(UnaryOp::Scale(s), a)
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(UnaryOp::AddConst(s), a)
    }
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(UnaryOp::PowConst(p), a)
    }
    pub fn clamp_min(&mut self, a: Var, m: f64) -> Var {
        self.unary(UnaryOp::ClampMin(m), a)
    }
    pub fn clamp_max(&mut self, a: Var, m: f64) -> Var {
        self.unary(UnaryOp::ClampMax(m), a)
    }

    // -- reductions and shape ---------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut out_shape = shape.clone();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::contract(format!("axis {ax} out of range for {shape:?}")));
            }
            out_shape[ax] = 1;
        }
        let out = reduce_to_shape(self.value(a), &out_shape);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SumAxes(a), rg))
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let n: usize = axes.iter().map(|&ax| shape.get(ax).copied().unwrap_or(1)).product();
        let s = self.sum_axes(a, axes)?;
        Ok(self.scale(s, 1.0 / n.max(1) as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).narrow(axis, start, len)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Narrow { x: a, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let ts: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&ts, axis)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    // -- linear algebra -----------------------------------------------------------

    /// Matrix product of rank-2 or batched rank-3 operands, with optional
    /// transposition of the trailing two axes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let out = matmul_forward(self.value(a), self.value(b), ta, tb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, rg))
    }

    // -- spatial --------------------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, pad: PadMode) -> Result<Var> {
        let out = pops::conv2d_forward(self.value(x), self.value(w), pad)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::Conv2d { x, w, pad }, rg))
    }

    pub fn filter(&mut self, x: Var, taps: &[f64], origin: usize, axis: Axis, pad: PadMode) -> Var {
        let out = pops::filter1d(self.value(x), taps, origin, axis, pad);
        let rg = self.rg(x);
        self.push(out, Op::Filter { x, taps: taps.to_vec(), origin, axis, pad }, rg)
    }

    pub fn zero_stuff2x(&mut self, x: Var) -> Var {
        let out = pops::zero_stuff2x(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::ZeroStuff2x(x), rg)
    }

    pub fn decimate2x(&mut self, x: Var) -> Var {
        let out = pops::decimate2x(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Decimate2x(x), rg)
    }

    pub fn roll(&mut self, x: Var, dy: i64, dx: i64) -> Var {
        let out = pops::roll(self.value(x), dy, dx);
        let rg = self.rg(x);
        self.push(out, Op::Roll { x, dy, dx }, rg)
    }

    // -- backward ---------------------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_with(loss, Tensor::full(self.shape(loss), T::one()))
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(out) {
            return Err(Error::contract("backward seed shape mismatch"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(out) {
            return Ok(Gradients { grads });
        }
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ga, gb) = binary_backward(*op, ta, tb, &node.value, g, self.rg(*a), self.rg(*b))?;
                if let Some(ga) = ga {
                    self.accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Unary(op, a) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut ga = g.clone();
                for ((gv, &xv), &yv) in ga.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *gv *= unary_derivative(*op, xv, yv);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let gv = g.item();
                let ga = Tensor::full(self.shape(*a), gv);
                self.accumulate(grads, *a, ga);
            }
            Op::SumAxes(a) => {
                let shape = self.shape(*a).to_vec();
                let mut ga = Tensor::zeros(&shape);
                let sg = broadcast_strides(g.shape(), &shape);
                let zero = vec![0; shape.len()];
                let src = g.data();
                let dst = ga.data_mut();
                for_each_broadcast(&shape, &sg, &zero, |o, s, _| dst[o] = src[s]);
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let ga = g.clone().reshape(self.shape(*a))?;
                self.accumulate(grads, *a, ga);
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let mut ga = Tensor::zeros(&shape);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let len = g.shape()[*axis];
                let dim = shape[*axis];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    ga.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, ga);
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        let gp = g.narrow(*axis, start, len)?;
                        self.accumulate(grads, p, gp);
                    }
                    start += len;
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    // d op(a) = g op(b)^T
                    let ga = if !*ta {
                        matmul_forward(g, bv, false, !*tb)?
                    } else {
                        matmul_forward(bv, g, *tb, true)?
                    };
                    self.accumulate(grads, *a, reduce_batch(ga, av.shape()));
                }
                if self.rg(*b) {
                    // d op(b) = op(a)^T g
                    let gb = if !*tb {
                        matmul_forward(av, g, !*ta, false)?
                    } else {
                        matmul_forward(g, av, true, *ta)?
                    };
                    self.accumulate(grads, *b, reduce_batch(gb, bv.shape()));
                }
            }
            Op::Conv2d { x, w, pad } => {
                let (gx, gw) = pops::conv2d_backward(self.value(*x), self.value(*w), g, *pad, self.rg(*x), self.rg(*w))?;
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::Filter { x, taps, origin, axis, pad } => {
                let gx = pops::filter1d_adjoint(g, taps, *origin, *axis, *pad);
                self.accumulate(grads, *x, gx);
            }
            Op::ZeroStuff2x(x) => {
                let gx = pops::decimate2x(g);
                self.accumulate(grads, *x, gx);
            }
            Op::Decimate2x(x) => {
                let gx = pops::zero_stuff2x(g);
                self.accumulate(grads, *x, gx);
            }
            Op::Roll { x, dy, dx } => {
                let gx = pops::roll(g, -dy, -dx);
                self.accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }
}

fn binary_forward<T: Real>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let f = |x: T, y: T| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => x / y,
    };
    if a.shape() == b.shape() {
        return Ok(a.zip_map(b, f));
    }
    if b.numel() == 1 && b.rank() <= a.rank() {
        let bv = b.data()[0];
        return Ok(a.map(|x| f(x, bv)));
    }
    if a.numel() == 1 && a.rank() <= b.rank() {
        let av = a.data()[0];
        return Ok(b.map(|y| f(av, y)));
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let mut out = Tensor::zeros(&shape);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for_each_broadcast(&shape, &sa, &sb, |o, i, j| od[o] = f(ad[i], bd[j]));
    Ok(out)
}

#[allow(clippy::type_complexity)]
fn binary_backward<T: Real>(
    op: BinaryOp,
    a: &Tensor<T>,
    b: &Tensor<T>,
    out: &Tensor<T>,
    g: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let shape = out.shape();
    let sa = broadcast_strides(a.shape(), shape);
    let sb = broadcast_strides(b.shape(), shape);
    let mut ga = need_a.then(|| Tensor::zeros(a.shape()));
    let mut gb = need_b.then(|| Tensor::zeros(b.shape()));
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    {
        let mut gad = ga.as_mut().map(|t| t.data_mut());
        let mut gbd = gb.as_mut().map(|t| t.data_mut());
        // scalar broadcast of rank-0 b onto a: strides computed against out shape
        let sb = if b.numel() == 1 && b.shape() != shape { vec![0; shape.len()] } else { sb };
        let sa = if a.numel() == 1 && a.shape() != shape { vec![0; shape.len()] } else { sa };
        for_each_broadcast(shape, &sa, &sb, |o, i, j| {
            let (x, y, gv) = (ad[i], bd[j], gd[o]);
            let (dx, dy) = match op {
                BinaryOp::Add => (gv, gv),
                BinaryOp::Sub => (gv, -gv),
                BinaryOp::Mul => (gv * y, gv * x),
                BinaryOp::Div => (gv / y, -gv * x / (y * y)),
            };
            if let Some(d) = gad.as_deref_mut() {
                d[i] += dx;
            }
            if let Some(d) = gbd.as_deref_mut() {
                d[j] += dy;
            }
        });
    }
    Ok((ga, gb))
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn unary_forward<T: Real>(op: UnaryOp, x: T) -> T {
    match op {
        UnaryOp::Neg => -x,
        UnaryOp::Exp => x.exp(),
        UnaryOp::Ln => x.ln(),
        UnaryOp::Sqrt => x.sqrt(),
        UnaryOp::Square => x * x,
        UnaryOp::Abs => x.abs(),
        UnaryOp::Recip => T::one() / x,
        UnaryOp::Sigmoid => sigmoid(x),
        UnaryOp::Softplus => softplus(x),
        UnaryOp::Tanh => x.tanh(),
        UnaryOp::Relu => x.max(T::zero()),
        UnaryOp::LeakyRelu(s) => {
            if x > T::zero() {
                x
            } else {
                x * T::c(s)
            }
        }
        UnaryOp::Scale(s) => x * T::c(s),
        UnaryOp::AddConst(s) => x + T::c(s),
        UnaryOp::PowConst(p) => x.powf(T::c(p)),
        UnaryOp::SoftClampMax(k) => {
            let k = T::c(k);
            x - softplus(k * (x - T::one())) / k
        }
        UnaryOp::ClampMin(m) => x.max(T::c(m)),
        UnaryOp::ClampMax(m) => x.min(T::c(m)),
    }
}

fn unary_derivative<T: Real>(op: UnaryOp, x: T, y: T) -> T {
    match op {
        UnaryOp::Neg => -T::one(),
        UnaryOp::Exp => y,
        UnaryOp::Ln => T::one() / x,
        UnaryOp::Sqrt => T::c(0.5) / y,
        UnaryOp::Square => T::c(2.0) * x,
        UnaryOp::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        UnaryOp::Recip => -y * y,
        UnaryOp::Sigmoid => y * (T::one() - y),
        UnaryOp::Softplus => sigmoid(x),
        UnaryOp::Tanh => T::one() - y * y,
        UnaryOp::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnaryOp::LeakyRelu(s) => {
            if x > T::zero() {
                T::one()
            } else {
                T::c(s)
            }
        }
        UnaryOp::Scale(s) => T::c(s),
        UnaryOp::AddConst(_) => T::one(),
        UnaryOp::PowConst(p) => T::c(p) * x.powf(T::c(p - 1.0)),
        UnaryOp::SoftClampMax(k) => T::one() - sigmoid(T::c(k) * (x - T::one())),
        UnaryOp::ClampMin(m) => {
            if x > T::c(m) {
                T::one()
            } else {
                T::zero()
            }
        }
        UnaryOp::ClampMax(m) => {
            if x < T::c(m) {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}

/// `(batch, rows, cols)` of a rank-2/3 operand after optional transposition,
/// plus its row/column strides in memory.
fn mm_view(shape: &[usize], t: bool) -> Result<(usize, usize, usize, isize, isize)> {
    let (b, r, c) = match shape {
        [r, c] => (1, *r, *c),
        [b, r, c] => (*b, *r, *c),
        _ => return Err(Error::contract(format!("matmul operand must be rank 2 or 3, got {shape:?}"))),
    };
    Ok(if t { (b, c, r, 1, c as isize) } else { (b, r, c, c as isize, 1) })
}

fn matmul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let (ba, m, k, rsa, csa) = mm_view(a.shape(), ta)?;
    let (bb, k2, n, rsb, csb) = mm_view(b.shape(), tb)?;
    if k != k2 {
        return Err(Error::contract(format!(
            "matmul inner dims differ: {:?}{} x {:?}{}",
            a.shape(),
            if ta { "^T" } else { "" },
            b.shape(),
            if tb { "^T" } else { "" }
        )));
    }
    if ba != bb && ba != 1 && bb != 1 {
        return Err(Error::contract("matmul batch mismatch"));
    }
    let batch = ba.max(bb);
    let batched = a.rank() == 3 || b.rank() == 3;
    let shape: Vec<usize> = if batched { vec![batch, m, n] } else { vec![m, n] };
    let mut out = Tensor::zeros(&shape);
    let (sa, sb) = (m * k, k * n);
    for i in 0..batch {
        let ad = &a.data()[if ba == 1 { 0 } else { i * sa }..];
        let bd = &b.data()[if bb == 1 { 0 } else { i * sb }..];
        let od = &mut out.data_mut()[i * m * n..(i + 1) * m * n];
        T::gemm(m, k, n, T::one(), ad, rsa, csa, bd, rsb, csb, T::zero(), od, n as isize, 1);
    }
    Ok(out)
}

/// Sum a batched gradient down to an unbatched operand shape when needed.
fn reduce_batch<T: Real>(g: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g;
    }
    if shape.len() == 2 && g.rank() == 3 {
        let (b, r, c) = (g.shape()[0], g.shape()[1], g.shape()[2]);
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..b {
            for (o, &v) in out.data_mut().iter_mut().zip(&g.data()[i * r * c..(i + 1) * r * c]) {
                *o += v;
            }
        }
        return out;
    }
    if shape.len() == 3 && shape[0] == 1 && g.rank() == 3 {
        let r = reduce_batch(g, &shape[1..]);
        return r.reshape(shape).expect("same numel");
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    /// Check d(sum(f(x) * r))/dx for a fixed random projection r.
    fn check_unary_graph(shape: &[usize], lo: f64, hi: f64, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_tensor(shape, &mut rng, lo, hi);
        let build = |g: &mut Graph<f64>, x: Var| -> Result<Var> {
            let y = f(g, x)?;
            let r = Tensor::from_fn(g.shape(y), |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4);
            let r = g.constant(r);
            let p = g.mul(y, r)?;
            Ok(g.sum(p))
        };
        let err = grad_check(
            |x: &Tensor<f64>| {
                let mut g = Graph::new();
                let v = g.constant(x.clone());
                let l = build(&mut g, v)?;
                Ok(g.value(l).item())
            },
            |x: &Tensor<f64>| {
                let mut g = Graph::new();
                let v = g.param(x.clone());
                let l = build(&mut g, v)?;
                let mut gr = g.backward(l)?;
                Ok(gr.take(v).unwrap())
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn unary_ops_gradients() {
        let ops = [
            UnaryOp::Neg,
            UnaryOp::Exp,
            UnaryOp::Square,
            UnaryOp::Sigmoid,
            UnaryOp::Softplus,
            UnaryOp::Tanh,
            UnaryOp::LeakyRelu(0.2),
            UnaryOp::Scale(-1.7),
            UnaryOp::AddConst(0.3),
            UnaryOp::SoftClampMax(4.0),
        ];
        for op in ops {
            check_unary_graph(&[3, 5], -2.0, 2.0, |g, x| Ok(g.unary(op, x)));
        }
        // sharp knee: finite differences lose accuracy on the curvature
        check_unary_graph(&[3, 5], 0.5, 1.5, |g, x| Ok(g.unary(UnaryOp::SoftClampMax(20.0), x)));
        for op in [UnaryOp::Ln, UnaryOp::Sqrt, UnaryOp::Recip, UnaryOp::PowConst(0.4545)] {
            check_unary_graph(&[3, 5], 0.2, 2.0, |g, x| Ok(g.unary(op, x)));
        }
    }

    #[test]
    fn broadcast_binary_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = rand_tensor(&[1, 3, 1, 2], &mut rng, 0.5, 1.5);
        for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
            let bc = b.clone();
            check_unary_graph(&[2, 3, 4, 2], -1.0, 1.0, move |g, x| {
                let c = g.constant(bc.clone());
                g.binary(op, x, c)
            });
            let bc = b.clone();
            check_unary_graph(&[1, 3, 1, 2], 0.5, 1.5, move |g, x| {
                let c = g.constant(Tensor::from_fn(&[2, 3, 4, 2], |i| (i as f64 * 0.37).sin() + 2.0));
                let _ = &bc;
                g.binary(op, c, x)
            });
        }
    }

    #[test]
    fn scalar_broadcast_gradients() {
        check_unary_graph(&[1], 0.5, 1.5, |g, s| {
            let c = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
            g.mul(c, s)
        });
    }

    #[test]
    fn reduction_and_shape_gradients() {
        check_unary_graph(&[2, 3, 4], -1.0, 1.0, |g, x| g.sum_axes(x, &[0, 2]));
        check_unary_graph(&[2, 3, 4], -1.0, 1.0, |g, x| g.mean_axes(x, &[1]));
        check_unary_graph(&[2, 3, 4], -1.0, 1.0, |g, x| g.reshape(x, &[6, 4]));
        check_unary_graph(&[2, 5, 4], -1.0, 1.0, |g, x| g.narrow(x, 1, 1, 3));
        check_unary_graph(&[2, 3, 4], -1.0, 1.0, |g, x| {
            let y = g.square(x);
            g.concat(&[x, y, x], 1)
        });
    }

    #[test]
    fn matmul_gradients_all_transpositions() {
        for ta in [false, true] {
            for tb in [false, true] {
                let bshape = if tb { [5, 4] } else { [4, 5] };
                let b = Tensor::from_fn(&bshape, |i| (i as f64 * 0.3).cos());
                let ashape = if ta { [4, 3] } else { [3, 4] };
                let bc = b.clone();
                check_unary_graph(&ashape, -1.0, 1.0, move |g, x| {
                    let c = g.constant(bc.clone());
                    g.matmul(x, c, ta, tb)
                });
                let a = Tensor::from_fn(&ashape, |i| (i as f64 * 0.7).sin());
                check_unary_graph(&bshape, -1.0, 1.0, move |g, x| {
                    let c = g.constant(a.clone());
                    g.matmul(c, x, ta, tb)
                });
            }
        }
        // batched
        check_unary_graph(&[2, 3, 4], -1.0, 1.0, |g, x| g.matmul(x, x, false, true));
    }

    #[test]
    fn conv_gradients_both_pad_modes() {
        for pad in [PadMode::Circular, PadMode::Zero] {
            let w = Tensor::from_fn(&[2, 3, 3, 3], |i| ((i * 31) % 17) as f64 / 17.0 - 0.5);
            check_unary_graph(&[2, 3, 4, 8], -1.0, 1.0, move |g, x| {
                let wv = g.constant(w.clone());
                g.conv2d(x, wv, pad)
            });
            let x0 = Tensor::from_fn(&[2, 3, 4, 4], |i| ((i * 13) % 7) as f64 / 7.0 - 0.5);
            check_unary_graph(&[2, 3, 3, 3], -1.0, 1.0, move |g, w| {
                let xv = g.constant(x0.clone());
                g.conv2d(xv, w, pad)
            });
        }
        let w = Tensor::from_fn(&[4, 3, 1, 1], |i| i as f64 * 0.1 - 0.5);
        check_unary_graph(&[2, 3, 4, 4], -1.0, 1.0, move |g, x| {
            let wv = g.constant(w.clone());
            g.conv2d(x, wv, PadMode::Circular)
        });
    }

    #[test]
    fn resampling_and_roll_gradients() {
        for pad in [PadMode::Circular, PadMode::Zero] {
            check_unary_graph(&[1, 2, 8, 8], -1.0, 1.0, move |g, x| {
                let y = g.filter(x, &[0.1, 0.3, 0.4, 0.2], 1, Axis::Width, pad);
                Ok(g.filter(y, &[0.5, 0.25, 0.25], 2, Axis::Height, pad))
            });
        }
        check_unary_graph(&[1, 2, 4, 4], -1.0, 1.0, |g, x| Ok(g.zero_stuff2x(x)));
        check_unary_graph(&[1, 2, 8, 8], -1.0, 1.0, |g, x| Ok(g.decimate2x(x)));
        check_unary_graph(&[1, 2, 8, 4], -1.0, 1.0, |g, x| Ok(g.roll(x, 3, -5)));
    }

    #[test]
    fn no_grad_through_constants() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(&[2], 1.0));
        let b = g.param(Tensor::full(&[2], 2.0));
        let c = g.mul(a, b).unwrap();
        let l = g.sum(c);
        let gr = g.backward(l).unwrap();
        assert!(gr.get(a).is_none());
        assert_eq!(gr.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[1], 3.0));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let l = g.sum(z);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().item(), 7.0);
    }
}
