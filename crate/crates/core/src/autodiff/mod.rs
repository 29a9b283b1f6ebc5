//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every primitive in execution order. Each node keeps its
//! value and enough of its inputs to evaluate its vector-Jacobian product, so
//! [`Graph::backward`] is a single reverse sweep.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::shape::{broadcast_index, broadcastable, matmul_shape, AxisSet};
use crate::tensor::{Padding, Tensor};

use kernels::ConvGeom;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    /// `lhs ⊕ rhs` with `rhs` broadcast into the shape of `lhs`.
    Binary { lhs: Var, rhs: Var, kind: BinaryKind },
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var),
    Relu(Var),
    Tanh(Var),
    Mean { x: Var, axes: AxisSet },
    Sum(Var),
    Reshape(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Values are immutable once recorded.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that does not receive a gradient (data, labels, frozen stats).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (parameters, or inputs being probed).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let [n, m] = matmul_shape(self.shape(a), self.shape(w))?;
        let k = self.shape(a)[1];
        let data = kernels::matmul(self.value(a).data(), self.value(w).data(), n, k, m);
        let needs = self.needs(a) || self.needs(w);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::MatMul(a, w), needs))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, padding)?;
        let data = kernels::conv2d(self.value(x).data(), self.value(k).data(), &geom);
        let needs = self.needs(x) || self.needs(k);
        let value = Tensor::from_parts(geom.out_shape().to_vec(), data);
        Ok(self.push(value, Op::Conv2d { x, k, geom }, needs))
    }

    fn binary(&mut self, lhs: Var, rhs: Var, kind: BinaryKind) -> Result<Var> {
        let (ls, rs) = (self.shape(lhs), self.shape(rhs));
        if !broadcastable(ls, rs) {
            return Err(Error::dim("broadcast", ls, rs));
        }
        let l = self.value(lhs).data();
        let r = self.value(rhs).data();
        let f = match kind {
            BinaryKind::Add => |a: f64, b: f64| a + b,
            BinaryKind::Sub => |a: f64, b: f64| a - b,
            BinaryKind::Mul => |a: f64, b: f64| a * b,
            BinaryKind::Div => |a: f64, b: f64| a / b,
        };
        let data: Vec<f64> = if ls == rs {
            l.iter().zip(r).map(|(&a, &b)| f(a, b)).collect()
        } else {
            let map = broadcast_index(ls, rs);
            l.iter().zip(&map).map(|(&a, &j)| f(a, r[j])).collect()
        };
        let shape = ls.to_vec();
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Binary { lhs, rhs, kind }, needs))
    }

    /// `lhs + rhs`, `rhs` broadcast into `lhs`.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(lhs, rhs, BinaryKind::Add)
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(lhs, rhs, BinaryKind::Sub)
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(lhs, rhs, BinaryKind::Mul)
    }

    pub fn div(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(lhs, rhs, BinaryKind::Div)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    /// Mean over `axes`, keeping reduced axes with size 1.
    pub fn mean_axes(&mut self, x: Var, axes: AxisSet) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        axes.check(shape.len())?;
        let count = axes.count(&shape);
        if count == 0 || shape.iter().any(|&d| d == 0) {
            return Err(Error::Data(format!("empty reduction over shape {shape:?}")));
        }
        let out_shape = axes.reduced_shape(&shape);
        let out_n: usize = out_shape.iter().product();
        let mut acc = vec![0.0; out_n];
        let map = broadcast_index(&shape, &out_shape);
        for (&v, &j) in self.value(x).data().iter().zip(&map) {
            acc[j] += v;
        }
        let inv = 1.0 / count as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(out_shape, acc), Op::Mean { x, axes }, needs))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [n, k] = shape[..] else {
            return Err(Error::dim("softmax_cross_entropy", &shape, &[labels.len()]));
        };
        if n != labels.len() || n == 0 {
            return Err(Error::dim("softmax_cross_entropy", &shape, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for r in 0..n {
            let row = &x[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - m).exp();
                z += *p;
            }
            probs[r * k..(r + 1) * k].iter_mut().for_each(|p| *p /= z);
            total += m + z.ln() - row[labels[r]];
        }
        let needs = self.needs(logits);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(total / n as f64), op, needs))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::from_parts(node.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, w) => {
                let (av, wv) = (self.value(*a), self.value(*w));
                let (n, k, m) = (av.shape()[0], av.shape()[1], wv.shape()[1]);
                if needs(*a) {
                    accumulate(grads, *a, kernels::matmul_grad_a(g, wv.data(), n, k, m));
                }
                if needs(*w) {
                    accumulate(grads, *w, kernels::matmul_grad_w(av.data(), g, n, k, m));
                }
            }
            Op::Conv2d { x, k, geom } => {
                if needs(*x) {
                    accumulate(grads, *x, kernels::conv2d_grad_x(g, self.value(*k).data(), geom));
                }
                if needs(*k) {
                    accumulate(grads, *k, kernels::conv2d_grad_k(self.value(*x).data(), g, geom));
                }
            }
            Op::Binary { lhs, rhs, kind } => {
                let lt = self.value(*lhs);
                let rt = self.value(*rhs);
                let map = (lt.shape() != rt.shape()).then(|| broadcast_index(lt.shape(), rt.shape()));
                let ridx = |i: usize| map.as_ref().map_or(i, |m| m[i]);
                let (l, r) = (lt.data(), rt.data());
                if needs(*lhs) {
                    let dl: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                        BinaryKind::Mul => g.iter().enumerate().map(|(i, &gi)| gi * r[ridx(i)]).collect(),
                        BinaryKind::Div => g.iter().enumerate().map(|(i, &gi)| gi / r[ridx(i)]).collect(),
                    };
                    accumulate(grads, *lhs, dl);
                }
                if needs(*rhs) {
                    let mut dr = vec![0.0; r.len()];
                    for (i, &gi) in g.iter().enumerate() {
                        let j = ridx(i);
                        dr[j] += match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * l[i],
                            BinaryKind::Div => -gi * l[i] / (r[j] * r[j]),
                        };
                    }
                    accumulate(grads, *rhs, dr);
                }
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => accumulate(grads, *x, g.to_vec()),
            Op::Square(x) => {
                let xv = self.value(*x).data();
                accumulate(grads, *x, g.iter().zip(xv).map(|(gi, xi)| 2.0 * gi * xi).collect());
            }
            Op::Sqrt(x) => {
                let y = node.value.data();
                accumulate(grads, *x, g.iter().zip(y).map(|(gi, yi)| gi * 0.5 / yi).collect());
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = g.iter().zip(xv).map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 }).collect();
                accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                accumulate(grads, *x, g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect());
            }
            Op::Mean { x, axes } => {
                let shape = self.shape(*x);
                let inv = 1.0 / axes.count(shape) as f64;
                let map = broadcast_index(shape, node.value.shape());
                accumulate(grads, *x, map.iter().map(|&j| g[j] * inv).collect());
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let scale = g[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= scale;
                }
                accumulate(grads, *logits, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&d).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(d),
    }
}

/// Result of [`Graph::backward`]: one gradient per reachable node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`; zeros shaped like `like` if `v` was unreachable.
    pub fn wrt(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
