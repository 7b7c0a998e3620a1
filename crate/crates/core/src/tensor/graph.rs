//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for gradient propagation.

use std::sync::Arc;

use super::ops::{self, BinaryOp, Broadcast, CglnStats, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::filterbank::Filterbank;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Var, rows: usize, d_in: usize, d_out: usize },
    Relu(Var),
    Prelu { x: Var, slope: Var },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid(Var),
    Cgln { x: Var, gain: Var, bias: Var, stats: CglnStats },
    MaxPool { x: Var, argmax: Vec<usize> },
    Binary { a: Var, b: Var, op: BinaryOp, bc: Broadcast },
    Concat { inputs: Vec<Var>, axis: usize },
    MeanTime(Var),
    Scale { x: Var, k: f64 },
    Sum(Var),
    Synthesize { x: Var, fb: Arc<Filterbank> },
    /// Scalar-valued fused op whose gradient w.r.t. `x` was computed during
    /// the forward pass.
    Fused { x: Var, local_grad: Vec<f64> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node, available after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad matches value shape"))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv1d_causal(&mut self, x: Var, w: Var, b: Var, dilation: usize, groups: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let geom = ops::conv_geometry(xv, wv, bv, dilation, groups)?;
        let out = ops::conv1d_causal(xv, wv, bv, dilation, groups)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, rg, Op::Conv { x, w, b, geom }))
    }

    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, d_in, d_out) = ops::fc_geometry(self.value(x), self.value(w), self.value(b))?;
        let out = ops::fully_connected(self.value(x), self.value(w), self.value(b))?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, rg, Op::Linear { x, w, b, rows, d_in, d_out }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::activation(self.value(x), ops::Activation::Relu);
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Relu(x))
    }

    /// PReLU with a learnable scalar slope held in a one-element node.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let a = self.value(slope).item()?;
        let out = ops::activation(self.value(x), ops::Activation::Prelu(a));
        let rg = self.any_grad(&[x, slope]);
        Ok(self.push(out, rg, Op::Prelu { x, slope }))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = ops::activation(self.value(x), ops::Activation::LeakyRelu(slope));
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::activation(self.value(x), ops::Activation::Sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Sigmoid(x))
    }

    pub fn cgln(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, stats) = ops::cgln_with_stats(self.value(x), self.value(gain), self.value(bias), ops::CGLN_EPS)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(out, rg, Op::Cgln { x, gain, bias, stats }))
    }

    pub fn maxpool1d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (out, argmax) = ops::maxpool_with_argmax(self.value(x), window)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::MaxPool { x, argmax }))
    }

    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let bc = ops::broadcast_of(self.value(a), self.value(b))?;
        let out = ops::elementwise(self.value(a), self.value(b), op)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Binary { a, b, op, bc }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = ops::concat(&values, axis)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            out,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let out = ops::mean_time(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::MeanTime(x)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * k).collect()).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Scale { x, k })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Sum(x))
    }

    /// Inverse STFT of a stacked real/imaginary block into a waveform.
    pub fn synthesize(&mut self, x: Var, fb: Arc<Filterbank>) -> Result<Var> {
        let out = fb.synthesize(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::Synthesize { x, fb }))
    }

    /// Records a scalar whose gradient w.r.t. `x` is already known.
    pub fn fused_scalar(&mut self, x: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        if local_grad.len() != self.value(x).numel() {
            return Err(Error::dim("fused op gradient length differs from its input"));
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(value), rg, Op::Fused { x, local_grad }))
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    /// Gradients accumulate into leaves across repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::usage("backward called on a value that tracks no gradients"));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &g);
            for (v, dg) in contributions {
                self.accumulate(v, dg);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, dg: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(&dg) {
                    *e += d;
                }
            }
            None => node.grad = Some(dg),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let mut dx = self.wants(*x).then(|| vec![0.0; self.value(*x).numel()]);
                let mut dw = self.wants(*w).then(|| vec![0.0; self.value(*w).numel()]);
                let mut db = self.wants(*b).then(|| vec![0.0; self.value(*b).numel()]);
                ops::conv_backward_acc(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                push_some(&mut out, *x, dx);
                push_some(&mut out, *w, dw);
                push_some(&mut out, *b, db);
            }
            Op::Linear { x, w, b, rows, d_in, d_out } => {
                let mut dx = self.wants(*x).then(|| vec![0.0; self.value(*x).numel()]);
                let mut dw = self.wants(*w).then(|| vec![0.0; self.value(*w).numel()]);
                let mut db = self.wants(*b).then(|| vec![0.0; self.value(*b).numel()]);
                ops::fc_backward_acc(
                    *rows,
                    *d_in,
                    *d_out,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                push_some(&mut out, *x, dx);
                push_some(&mut out, *w, dw);
                push_some(&mut out, *b, db);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                out.push((*x, g.iter().zip(xv).map(|(&d, &a)| if a > 0.0 { d } else { 0.0 }).collect()));
            }
            Op::Prelu { x, slope } => {
                let xv = self.value(*x).data();
                let a = self.value(*slope).data()[0];
                if self.wants(*x) {
                    out.push((*x, g.iter().zip(xv).map(|(&d, &v)| if v >= 0.0 { d } else { a * d }).collect()));
                }
                if self.wants(*slope) {
                    let ds: f64 = g.iter().zip(xv).filter(|(_, &v)| v < 0.0).map(|(&d, &v)| d * v).sum();
                    out.push((*slope, vec![ds]));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                out.push((*x, g.iter().zip(xv).map(|(&d, &v)| if v >= 0.0 { d } else { slope * d }).collect()));
            }
            Op::Sigmoid(x) => {
                let s = node.value.data();
                out.push((*x, g.iter().zip(s).map(|(&d, &y)| d * y * (1.0 - y)).collect()));
            }
            Op::Cgln { x, gain, bias, stats } => {
                let xv = self.value(*x);
                let (c, t) = xv.dims2().expect("checked at forward");
                let (dx, dg, db) = ops::cgln_backward(xv.data(), c, t, self.value(*gain).data(), stats, g);
                out.push((*x, dx));
                out.push((*gain, dg));
                out.push((*bias, db));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&idx, &d) in argmax.iter().zip(g) {
                    dx[idx] += d;
                }
                out.push((*x, dx));
            }
            Op::Binary { a, b, op, bc } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (da, db) = binary_grads(*op, *bc, av, bv, g);
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let span = self.value(*v).shape()[*axis] * inner;
                    let mut dv = Vec::with_capacity(outer * span);
                    for o in 0..outer {
                        dv.extend_from_slice(&g[o * total + offset..o * total + offset + span]);
                    }
                    offset += span;
                    out.push((*v, dv));
                }
            }
            Op::MeanTime(x) => {
                let (c, t) = self.value(*x).dims2().expect("checked at forward");
                let mut dx = vec![0.0; c * t];
                for ch in 0..c {
                    dx[ch * t..(ch + 1) * t].fill(g[ch] / t as f64);
                }
                out.push((*x, dx));
            }
            Op::Scale { x, k } => out.push((*x, g.iter().map(|d| d * k).collect())),
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Synthesize { x, fb } => {
                let frames = self.value(*x).shape()[1];
                out.push((*x, fb.synthesize_adjoint(g, frames)));
            }
            Op::Fused { x, local_grad } => out.push((*x, local_grad.iter().map(|d| d * g[0]).collect())),
        }
        out
    }
}

fn push_some(out: &mut Vec<(Var, Vec<f64>)>, v: Var, g: Option<Vec<f64>>) {
    if let Some(g) = g {
        out.push((v, g));
    }
}

fn binary_grads(op: BinaryOp, bc: Broadcast, a: &[f64], b: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    match (op, bc) {
        (BinaryOp::Add, Broadcast::Same) => (g.to_vec(), g.to_vec()),
        (BinaryOp::Mul, Broadcast::Same) => (
            g.iter().zip(b).map(|(d, y)| d * y).collect(),
            g.iter().zip(a).map(|(d, x)| d * x).collect(),
        ),
        (BinaryOp::Add, Broadcast::LhsChannels { t, .. }) => (reduce_rows(g, t), g.to_vec()),
        (BinaryOp::Add, Broadcast::RhsChannels { t, .. }) => (g.to_vec(), reduce_rows(g, t)),
        (BinaryOp::Mul, Broadcast::LhsChannels { t, .. }) => {
            let prod: Vec<f64> = g.iter().zip(b).map(|(d, y)| d * y).collect();
            (
                reduce_rows(&prod, t),
                g.iter().enumerate().map(|(i, d)| d * a[i / t]).collect(),
            )
        }
        (BinaryOp::Mul, Broadcast::RhsChannels { t, .. }) => {
            let prod: Vec<f64> = g.iter().zip(a).map(|(d, x)| d * x).collect();
            (
                g.iter().enumerate().map(|(i, d)| d * b[i / t]).collect(),
                reduce_rows(&prod, t),
            )
        }
    }
}

fn reduce_rows(g: &[f64], t: usize) -> Vec<f64> {
    g.chunks(t).map(|r| r.iter().sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_weighted_sum_is_input() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.5]), false);
        let w = g.leaf(Tensor::from_vec(vec![0.3, 0.1, -0.7]), true);
        let p = g.mul(w, x).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, -2.0, 3.5]);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let s = g.sigmoid(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn backward_on_untracked_value_is_usage_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0), false);
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
        let v = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(v), Err(Error::Usage(_))));
    }

    #[test]
    fn gradients_accumulate_over_shared_inputs() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![2.0]), true);
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        g.backward(z).unwrap();
        // d(x² + x)/dx = 2x + 1
        assert_eq!(g.grad(x).unwrap().data(), &[5.0]);
    }
}
