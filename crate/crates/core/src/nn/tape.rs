//! Reverse-mode differentiation over an append-only operation tape.
//!
//! Every op appends one node whose inputs already live on the tape, so the
//! node order is a topological order and `backward` is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use super::functional;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernels: Var, bias: Var, stride: usize, pad: usize },
    MaxPool { input: Var, argmax: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Linear { input: Var, weight: Var, bias: Option<Var> },
    GlobalAvgPool(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Slice { input: Var, start: usize },
    Row { table: Var, row: usize },
    Sum(Var),
    Mean(Vec<Var>),
    SoftmaxCrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations. Confined to one worker.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.node(var).value
    }

    /// Gradient of the last `backward` target with respect to `var`.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.check(var).ok()?;
        self.grads.get(var.index).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Autograd("variable does not belong to this tape".into()));
        }
        Ok(())
    }

    fn node(&self, var: Var) -> &Node {
        debug_assert_eq!(var.tape, self.id);
        &self.nodes[var.index]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    fn checked(&self, op: &'static str, vars: &[Var]) -> Result<()> {
        for v in vars {
            self.check(*v).map_err(|_| Error::invalid(op, "input from a different tape"))?;
        }
        Ok(())
    }

    fn finite(&self, op: &'static str, t: &Tensor) -> Result<()> {
        if t.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    /// 2-D convolution of a `C×H×W` input with `K×C×kh×kw` kernels, zero padding.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        self.checked("conv2d", &[input, kernels, bias])?;
        let out = functional::conv2d(self.value(input), self.value(kernels), self.value(bias), stride, pad)?;
        self.finite("conv2d", &out)?;
        let rg = self.rg(&[input, kernels, bias]);
        Ok(self.push(out, Op::Conv2d { input, kernels, bias, stride, pad }, rg))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        self.checked("maxpool2d", &[input])?;
        let (out, argmax) = functional::maxpool2d(self.value(input), window, stride)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.checked("relu", &[input])?;
        let out = map(self.value(input), |x| x.max(0.0));
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Relu(input), rg))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.checked("sigmoid", &[input])?;
        let out = map(self.value(input), functional::sigmoid);
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Sigmoid(input), rg))
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        self.checked("tanh", &[input])?;
        let out = map(self.value(input), f64::tanh);
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Tanh(input), rg))
    }

    /// `weight · input (+ bias)` for a length-`D` input and `M×D` weight.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let mut vars = vec![input, weight];
        vars.extend(bias);
        self.checked("linear", &vars)?;
        let out = functional::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        self.finite("linear", &out)?;
        let rg = self.rg(&vars);
        Ok(self.push(out, Op::Linear { input, weight, bias }, rg))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        self.checked("global_avg_pool", &[input])?;
        let out = functional::global_avg_pool(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::GlobalAvgPool(input), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.checked("add", &[a, b])?;
        let out = zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.checked("mul", &[a, b])?;
        let out = zip(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.checked("scale", &[a])?;
        let out = map(self.value(a), |x| x * factor);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale(a, factor), rg))
    }

    /// Contiguous sub-vector `[start, start+len)` of a flattened tensor.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        self.checked("slice", &[input])?;
        let src = self.value(input).data();
        if len == 0 || start + len > src.len() {
            return Err(Error::shape("slice", format!("[{start}, {}) out of {} values", start + len, src.len())));
        }
        let out = Tensor::vector(&src[start..start + len]);
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Slice { input, start }, rg))
    }

    /// Row `row` of a 2-D table (embedding lookup).
    pub fn row(&mut self, table: Var, row: usize) -> Result<Var> {
        self.checked("row", &[table])?;
        let t = self.value(table);
        if t.shape().len() != 2 || row >= t.shape()[0] {
            return Err(Error::shape("row", format!("row {row} of table {:?}", t.shape())));
        }
        let width = t.shape()[1];
        let out = Tensor::vector(&t.data()[row * width..(row + 1) * width]);
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::Row { table, row }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.checked("sum", &[input])?;
        let s = self.value(input).data().iter().sum();
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(input), rg))
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::invalid("mean", "no inputs"));
        }
        self.checked("mean", inputs)?;
        let shape = self.value(inputs[0]).shape().to_vec();
        let mut acc = vec![0.0; self.value(inputs[0]).len()];
        for v in inputs {
            let t = self.value(*v);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("mean", format!("{:?} vs {:?}", t.shape(), shape)));
            }
            for (a, x) in acc.iter_mut().zip(t.data()) {
                *a += x;
            }
        }
        let n = inputs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let out = Tensor::new(shape, acc)?;
        let rg = self.rg(inputs);
        Ok(self.push(out, Op::Mean(inputs.to_vec()), rg))
    }

    /// `-log softmax(logits)[target]`, stabilized by max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        self.checked("softmax_cross_entropy", &[logits])?;
        let z = self.value(logits).data();
        if target >= z.len() {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("target class {target} out of range for {} classes", z.len()),
            ));
        }
        let (loss, probs) = functional::softmax_cross_entropy(z, target);
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy { logits, target, probs }, rg))
    }

    /// Populates gradients of `loss` with respect to every node on the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if !self.value(loss).is_scalar() {
            return Err(Error::Autograd(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(vec![1.0]);
        for index in (0..=loss.index).rev() {
            let Some(g) = grads[index].take() else { continue };
            let node = &self.nodes[index];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[index] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.index].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernels, bias, stride, pad } => {
                let x = &nodes[input.index].value;
                let w = &nodes[kernels.index].value;
                let geom = functional::ConvGeom {
                    c: x.shape()[0],
                    h: x.shape()[1],
                    w: x.shape()[2],
                    k: w.shape()[0],
                    kh: w.shape()[2],
                    kw: w.shape()[3],
                    oh: node.value.shape()[1],
                    ow: node.value.shape()[2],
                    stride: *stride,
                    pad: *pad,
                };
                let need_x = wants(input);
                let need_w = wants(kernels);
                let (dx, dw, db) = geom.backward(x.data(), w.data(), g, need_x, need_w);
                if need_x {
                    acc(grads, *input, &dx);
                }
                if need_w {
                    acc(grads, *kernels, &dw);
                }
                if wants(bias) {
                    acc(grads, *bias, &db);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0; nodes[input.index].value.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                acc(grads, *input, &dx);
            }
            Op::Relu(a) => {
                let x = nodes[a.index].value.data();
                let dx: Vec<f64> = x.iter().zip(g).map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 }).collect();
                acc(grads, *a, &dx);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let dx: Vec<f64> = y.iter().zip(g).map(|(&yi, &gi)| gi * yi * (1.0 - yi)).collect();
                acc(grads, *a, &dx);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let dx: Vec<f64> = y.iter().zip(g).map(|(&yi, &gi)| gi * (1.0 - yi * yi)).collect();
                acc(grads, *a, &dx);
            }
            Op::Linear { input, weight, bias } => {
                let x = nodes[input.index].value.data();
                let w = nodes[weight.index].value.data();
                let d = x.len();
                if wants(input) {
                    let mut dx = vec![0.0; d];
                    for (m, &gm) in g.iter().enumerate() {
                        let row = &w[m * d..(m + 1) * d];
                        for (dxi, wi) in dx.iter_mut().zip(row) {
                            *dxi += gm * wi;
                        }
                    }
                    acc(grads, *input, &dx);
                }
                if wants(weight) {
                    let mut dw = vec![0.0; w.len()];
                    for (m, &gm) in g.iter().enumerate() {
                        for (dwi, xi) in dw[m * d..(m + 1) * d].iter_mut().zip(x) {
                            *dwi = gm * xi;
                        }
                    }
                    acc(grads, *weight, &dw);
                }
                if let Some(b) = bias {
                    if wants(b) {
                        acc(grads, *b, g);
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                let x = &nodes[a.index].value;
                let area = x.shape()[1] * x.shape()[2];
                let mut dx = vec![0.0; x.len()];
                for (k, &gk) in g.iter().enumerate() {
                    dx[k * area..(k + 1) * area].iter_mut().for_each(|v| *v = gk / area as f64);
                }
                acc(grads, *a, &dx);
            }
            Op::Add(a, b) => {
                if wants(a) {
                    acc(grads, *a, g);
                }
                if wants(b) {
                    acc(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (nodes[a.index].value.data(), nodes[b.index].value.data());
                if wants(a) {
                    let da: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * yi).collect();
                    acc(grads, *a, &da);
                }
                if wants(b) {
                    let db: Vec<f64> = g.iter().zip(x).map(|(gi, xi)| gi * xi).collect();
                    acc(grads, *b, &db);
                }
            }
            Op::Scale(a, f) => {
                let da: Vec<f64> = g.iter().map(|gi| gi * f).collect();
                acc(grads, *a, &da);
            }
            Op::Slice { input, start } => {
                let mut dx = vec![0.0; nodes[input.index].value.len()];
                dx[*start..*start + g.len()].copy_from_slice(g);
                acc(grads, *input, &dx);
            }
            Op::Row { table, row } => {
                let t = &nodes[table.index].value;
                let width = t.shape()[1];
                let mut dt = vec![0.0; t.len()];
                dt[row * width..(row + 1) * width].copy_from_slice(g);
                acc(grads, *table, &dt);
            }
            Op::Sum(a) => {
                let dx = vec![g[0]; nodes[a.index].value.len()];
                acc(grads, *a, &dx);
            }
            Op::Mean(inputs) => {
                let n = inputs.len() as f64;
                let dx: Vec<f64> = g.iter().map(|gi| gi / n).collect();
                for v in inputs {
                    if wants(v) {
                        acc(grads, *v, &dx);
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, target, probs } => {
                let mut dz: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                dz[*target] -= g[0];
                acc(grads, *logits, &dz);
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], var: Var, delta: &[f64]) {
    match &mut grads[var.index] {
        Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}
