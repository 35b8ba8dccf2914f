//! Reverse-mode differentiation over a per-forward-pass operation graph.
//!
//! A [`Graph`] records every operation as a node holding its computed value.
//! Nodes are appended in execution order, so that order is already a
//! topological sort; [`Graph::backward`] walks it in reverse and accumulates
//! gradients in a fixed order, which makes results bit-reproducible.

use crate::error::{Error, Result};
use crate::special::{digamma_unchecked, lgamma_unchecked, trigamma_unchecked};
use crate::tensor::{
    conv2d_backward, conv2d_forward, upsample_backward, upsample_forward, Conv2dSpec, ConvGeometry,
    Tensor,
};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Softplus,
    Reciprocal,
    AddScalar(f64),
    MulScalar(f64),
    ClampMin(f64),
    Ln,
    Digamma,
    Lgamma,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Mean over the two spatial axes of a 4-D tensor.
    GlobalAvgPool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, spec: Conv2dSpec },
    Upsample { input: Var, factor: usize },
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Reduce { op: ReduceOp, input: Var, axes: Vec<usize> },
    Channel { input: Var, index: usize },
    Concat(Vec<Var>),
    ScaleChannels { input: Var, gate: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const MIN_DENOMINATOR: f64 = 1e-300;

impl UnaryOp {
    fn forward(self, xs: &[f64]) -> Vec<f64> {
        fn map(xs: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
            xs.iter().map(|&x| f(x)).collect()
        }
        match self {
            UnaryOp::Relu => map(xs, |x| x.max(0.0)),
            UnaryOp::Sigmoid => map(xs, sigmoid),
            UnaryOp::Softplus => map(xs, softplus),
            UnaryOp::Reciprocal => map(xs, |x| 1.0 / x),
            UnaryOp::AddScalar(c) => map(xs, |x| x + c),
            UnaryOp::MulScalar(c) => map(xs, |x| x * c),
            UnaryOp::ClampMin(lo) => map(xs, |x| x.max(lo)),
            UnaryOp::Ln => map(xs, f64::ln),
            UnaryOp::Digamma => map(xs, digamma_unchecked),
            UnaryOp::Lgamma => map(xs, lgamma_unchecked),
        }
    }

    /// Upstream gradient times d(output)/d(input), given inputs `xs` and outputs `ys`.
    fn backward(self, xs: &[f64], ys: &[f64], up: &[f64]) -> Vec<f64> {
        fn from_x(xs: &[f64], up: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
            xs.iter().zip(up).map(|(&x, &u)| u * f(x)).collect()
        }
        match self {
            UnaryOp::Relu => from_x(xs, up, |x| if x > 0.0 { 1.0 } else { 0.0 }),
            UnaryOp::Sigmoid => ys.iter().zip(up).map(|(&y, &u)| u * (y * (1.0 - y))).collect(),
            UnaryOp::Softplus => from_x(xs, up, sigmoid),
            UnaryOp::Reciprocal => ys.iter().zip(up).map(|(&y, &u)| u * (-y * y)).collect(),
            UnaryOp::AddScalar(_) => up.to_vec(),
            UnaryOp::MulScalar(c) => up.iter().map(|&u| u * c).collect(),
            UnaryOp::ClampMin(lo) => from_x(xs, up, |x| if x > lo { 1.0 } else { 0.0 }),
            UnaryOp::Ln => from_x(xs, up, |x| 1.0 / x),
            UnaryOp::Digamma => from_x(xs, up, trigamma_unchecked),
            UnaryOp::Lgamma => from_x(xs, up, digamma_unchecked),
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

fn accumulate_with(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let acc = slot.get_or_insert_with(|| vec![0.0; len]);
    f(acc);
}

/// Row-major strides of `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every input element, the flat index of the output element it reduces into.
fn reduce_targets(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> =
        shape.iter().enumerate().map(|(i, &e)| if axes.contains(&i) { 1 } else { e }).collect();
    let (in_s, out_s) = (strides(shape), strides(&out_shape));
    let n: usize = shape.iter().product();
    let targets = (0..n)
        .map(|flat| {
            let mut rem = flat;
            let mut target = 0;
            for d in 0..shape.len() {
                let idx = rem / in_s[d];
                rem %= in_s[d];
                if !axes.contains(&d) {
                    target += idx * out_s[d];
                }
            }
            target
        })
        .collect();
    (out_shape, targets)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(input), self.shape(kernel), spec)?;
        if let Some(b) = bias {
            if self.value(b).len() != geo.cout {
                return Err(Error::Shape(format!(
                    "conv2d bias has {} entries for {} output channels",
                    self.value(b).len(),
                    geo.cout
                )));
            }
        }
        let out = conv2d_forward(
            &geo,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![geo.n, geo.cout, geo.ho, geo.wo], out)?;
        let rg = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, spec }, rg))
    }

    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::Domain("upsampling factor must be at least 1".into()));
        }
        let [n, c, h, w] = self.value(input).dims4()?;
        let out = upsample_forward([n, c, h, w], factor, self.value(input).data());
        let value = Tensor::new(vec![n, c, h * factor, w * factor], out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Upsample { input, factor }, rg))
    }

    /// Binary elementwise op on equal shapes; either side may also be a single-element scalar.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.len() == 1 {
            ta.shape().to_vec()
        } else if ta.len() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(Error::Shape(format!(
                "{op:?} operands have shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let (da, db) = (ta.data(), tb.data());
        if op == BinaryOp::Div {
            if let Some(bad) = db.iter().find(|d| d.abs() < MIN_DENOMINATOR) {
                return Err(Error::Numeric(format!("division by {bad:e}")));
            }
        }
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
            BinaryOp::Div => |x: f64, y: f64| x / y,
        };
        let data: Vec<f64> = if da.len() == db.len() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if db.len() == 1 {
            da.iter().map(|&x| f(x, db[0])).collect()
        } else {
            db.iter().map(|&y| f(da[0], y)).collect()
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary(op, a, b), rg))
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

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let input = self.value(x);
        match op {
            UnaryOp::Ln | UnaryOp::Digamma | UnaryOp::Lgamma => {
                if let Some(bad) = input.data().iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                    return Err(Error::Domain(format!("{op:?} requires positive input, got {bad}")));
                }
            }
            UnaryOp::Reciprocal => {
                if let Some(bad) = input.data().iter().find(|d| d.abs() < MIN_DENOMINATOR) {
                    return Err(Error::Numeric(format!("reciprocal of {bad:e}")));
                }
            }
            _ => {}
        }
        let value = Tensor::new(input.shape().to_vec(), op.forward(input.data()))?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Unary(op, x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x).expect("relu is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Softplus, x).expect("softplus is total")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryOp::AddScalar(c), x).expect("scalar add is total")
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryOp::MulScalar(c), x).expect("scalar mul is total")
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(UnaryOp::ClampMin(lo), x).expect("clamp is total")
    }

    pub fn reciprocal(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Reciprocal, x)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Ln, x)
    }

    pub fn digamma(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Digamma, x)
    }

    pub fn lgamma(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Lgamma, x)
    }

    /// Reduces over `axes` (all axes when empty for `Sum`/`Mean`), keeping
    /// reduced extents as 1. Reducing over every axis yields shape `[1]`.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axes: Vec<usize> = match op {
            ReduceOp::GlobalAvgPool => {
                self.value(x).dims4()?;
                vec![2, 3]
            }
            _ if axes.is_empty() => (0..shape.len()).collect(),
            _ => axes.to_vec(),
        };
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::Domain(format!("axis {bad} out of range for shape {shape:?}")));
        }
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        if count == 0 {
            return Err(Error::Domain("reduction over an empty axis".into()));
        }
        let full = axes.len() == shape.len();
        let data = self.value(x).data();
        let (out_shape, values) = if full {
            (vec![1], vec![data.iter().sum::<f64>()])
        } else if axes == [2, 3] && shape.len() == 4 {
            let plane = shape[2] * shape[3];
            (
                vec![shape[0], shape[1], 1, 1],
                data.chunks_exact(plane).map(|p| p.iter().sum::<f64>()).collect(),
            )
        } else {
            let (out_shape, targets) = reduce_targets(&shape, &axes);
            let mut acc = vec![0.0; out_shape.iter().product()];
            for (v, &t) in data.iter().zip(&targets) {
                acc[t] += v;
            }
            (out_shape, acc)
        };
        let scale = if op == ReduceOp::Sum { 1.0 } else { 1.0 / count as f64 };
        let values = values.into_iter().map(|v| v * scale).collect();
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(out_shape, values)?, Op::Reduce { op, input: x, axes }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(ReduceOp::Sum, x, &[]).expect("non-empty tensors always reduce")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, &[])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::GlobalAvgPool, x, &[])
    }

    /// Selects one channel of a 4-D tensor, keeping the channel axis.
    pub fn channel(&mut self, x: Var, index: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if index >= c {
            return Err(Error::Shape(format!("channel {index} out of range for {c} channels")));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * plane);
        for b in 0..n {
            let off = (b * c + index) * plane;
            data.extend_from_slice(&src[off..off + plane]);
        }
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(vec![n, 1, h, w], data)?, Op::Channel { input: x, index }, rg))
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let [n, _, h, w] = self.value(first).dims4()?;
        let mut channels = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat operands disagree: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            channels += pc;
        }
        let mut data = Vec::with_capacity(n * channels * h * w);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let per = t.shape()[1] * h * w;
                data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![n, channels, h, w], data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Multiplies every channel plane of `x` (N×C×H×W) by the matching entry of `gate` (N×C×1×1).
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if self.shape(gate) != [n, c, 1, 1] {
            return Err(Error::Shape(format!(
                "channel gate has shape {:?}, expected {:?}",
                self.shape(gate),
                [n, c, 1, 1]
            )));
        }
        let g = self.value(gate).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .zip(g)
            .flat_map(|(plane, &s)| plane.iter().map(move |v| v * s))
            .collect();
        let rg = self.needs(x) || self.needs(gate);
        Ok(self.push(Tensor::new(vec![n, c, h, w], data)?, Op::ScaleChannels { input: x, gate }, rg))
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(up) = grads[i].take() else { continue };
            self.propagate(node, &up, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(up);
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, spec } => {
                let (ti, tk) = (self.value(*input), self.value(*kernel));
                let geo = ConvGeometry::new(ti.shape(), tk.shape(), *spec).expect("validated in forward");
                let need = (self.needs(*input), self.needs(*kernel), bias.is_some_and(|b| self.needs(b)));
                let g = conv2d_backward(&geo, ti.data(), tk.data(), up, need);
                if let Some(d) = g.input {
                    accumulate(&mut grads[input.0], d);
                }
                if let Some(d) = g.kernel {
                    accumulate(&mut grads[kernel.0], d);
                }
                if let (Some(b), Some(d)) = (bias, g.bias) {
                    accumulate(&mut grads[b.0], d);
                }
            }
            Op::Upsample { input, factor } => {
                if self.needs(*input) {
                    let dims = self.value(*input).dims4().expect("validated in forward");
                    accumulate(&mut grads[input.0], upsample_backward(dims, *factor, up));
                }
            }
            Op::Binary(op, a, b) => self.propagate_binary(*op, *a, *b, node, up, grads),
            Op::Unary(op, x) => {
                if self.needs(*x) {
                    let d = op.backward(self.value(*x).data(), node.value.data(), up);
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::Reduce { op, input, axes } => {
                if !self.needs(*input) {
                    return;
                }
                let shape = self.shape(*input);
                let n: usize = shape.iter().product();
                let count: usize = axes.iter().map(|&a| shape[a]).product();
                let scale = if *op == ReduceOp::Sum { 1.0 } else { 1.0 / count as f64 };
                accumulate_with(&mut grads[input.0], n, |acc| {
                    if up.len() == 1 {
                        acc.iter_mut().for_each(|a| *a += up[0] * scale);
                    } else if *axes == [2, 3] && shape.len() == 4 {
                        for (plane, &g) in acc.chunks_exact_mut(shape[2] * shape[3]).zip(up) {
                            plane.iter_mut().for_each(|a| *a += g * scale);
                        }
                    } else {
                        let (_, targets) = reduce_targets(shape, axes);
                        for (a, &t) in acc.iter_mut().zip(&targets) {
                            *a += up[t] * scale;
                        }
                    }
                });
            }
            Op::Channel { input, index } => {
                if !self.needs(*input) {
                    return;
                }
                let [n, c, h, w] = self.value(*input).dims4().expect("validated in forward");
                let plane = h * w;
                accumulate_with(&mut grads[input.0], n * c * plane, |acc| {
                    for b in 0..n {
                        let off = (b * c + index) * plane;
                        acc[off..off + plane]
                            .iter_mut()
                            .zip(&up[b * plane..(b + 1) * plane])
                            .for_each(|(a, g)| *a += g);
                    }
                });
            }
            Op::Concat(parts) => {
                let [n, c, h, w] = node.value.dims4().expect("validated in forward");
                let mut ch_off = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(n * pc * h * w);
                        for b in 0..n {
                            let off = (b * c + ch_off) * h * w;
                            d.extend_from_slice(&up[off..off + pc * h * w]);
                        }
                        accumulate(&mut grads[p.0], d);
                    }
                    ch_off += pc;
                }
            }
            Op::ScaleChannels { input, gate } => {
                let plane = {
                    let s = self.shape(*input);
                    s[2] * s[3]
                };
                let x = self.value(*input).data();
                let g = self.value(*gate).data();
                if self.needs(*input) {
                    let d = up
                        .chunks_exact(plane)
                        .zip(g)
                        .flat_map(|(u, &s)| u.iter().map(move |v| v * s))
                        .collect();
                    accumulate(&mut grads[input.0], d);
                }
                if self.needs(*gate) {
                    let d = up
                        .chunks_exact(plane)
                        .zip(x.chunks_exact(plane))
                        .map(|(u, xs)| u.iter().zip(xs).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(&mut grads[gate.0], d);
                }
            }
        }
    }

    fn propagate_binary(
        &self,
        op: BinaryOp,
        a: Var,
        b: Var,
        node: &Node,
        up: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n = up.len();
        let out = node.value.data();
        // Broadcast a scalar operand to the output length.
        let expand = |v: &[f64]| -> Vec<f64> { if v.len() == n { v.to_vec() } else { vec![v[0]; n] } };
        let fold = |g: Vec<f64>, len: usize| if len == 1 && n != 1 { vec![g.iter().sum()] } else { g };
        if self.needs(a) {
            let g: Vec<f64> = match op {
                BinaryOp::Add | BinaryOp::Sub => up.to_vec(),
                BinaryOp::Mul => up.iter().zip(expand(db)).map(|(u, y)| u * y).collect(),
                BinaryOp::Div => up.iter().zip(expand(db)).map(|(u, y)| u / y).collect(),
            };
            accumulate(&mut grads[a.0], fold(g, da.len()));
        }
        if self.needs(b) {
            let g: Vec<f64> = match op {
                BinaryOp::Add => up.to_vec(),
                BinaryOp::Sub => up.iter().map(|u| -u).collect(),
                BinaryOp::Mul => up.iter().zip(expand(da)).map(|(u, x)| u * x).collect(),
                BinaryOp::Div => {
                    up.iter().zip(out).zip(expand(db)).map(|((u, q), y)| u * (-q / y)).collect()
                }
            };
            accumulate(&mut grads[b.0], fold(g, db.len()));
        }
    }
}
