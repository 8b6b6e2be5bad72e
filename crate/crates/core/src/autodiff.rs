//! Define-by-run reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is acyclic and already
//! topologically sorted; `backward` walks it once in reverse.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::{self, ConvCache, NormCache, NormMode};
use crate::tensor::{Real, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        cache: ConvCache<T>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Norm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// Scalar quotient `a / b` of two one-element tensors.
    Div(Var, Var),
    AddConst(Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    ChannelMean(Var),
    BalancedBce {
        prob: Var,
        pos_weight: T,
        neg_weight: T,
    },
    NegEntropy(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Confined to one task at a time.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `var`; nodes the output does not depend on get zeros.
    pub fn get(&self, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    /// Borrowed gradient, `None` when the node was never reached.
    pub fn get_ref(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn one_element<T: Real>(a: &Tensor<T>, what: &str) -> Result<()> {
    if !a.is_scalar() {
        return Err(Error::Shape(format!(
            "{what} expects a one-element tensor, got {:?}",
            a.shape()
        )));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Hash of every piecewise decision on the tape: the sign pattern of each
    /// ReLU input, each pooling argmax, and whether each probability clamp is
    /// active. Two evaluations with equal signatures lie on the same smooth
    /// piece, which is what a finite-difference check needs.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        let floor = T::of(ops::PROB_FLOOR);
        let clamped = |p: T| p <= floor || p >= T::one() - floor;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => self.value(*x).data().iter().for_each(|&v| mix((v > T::zero()) as u64)),
                Op::MaxPool { argmax, .. } => argmax.iter().for_each(|&i| mix(i as u64)),
                Op::Sigmoid(_) => node.value.data().iter().for_each(|&v| mix(2 + clamped(v) as u64)),
                Op::BalancedBce { prob, .. } | Op::NegEntropy(prob) => {
                    self.value(*prob).data().iter().for_each(|&v| mix(4 + clamped(v) as u64))
                }
                _ => {}
            }
        }
        h
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (out, cache) = ops::conv3d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(out, Op::Conv { input, kernel, bias, cache }, rg, "conv3d")
    }

    pub fn maxpool3d(&mut self, input: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (out, argmax) = ops::maxpool3d_forward(self.value(input), k, stride, pad)?;
        let rg = self.rg(&[input]);
        self.push(out, Op::MaxPool { input, argmax }, rg, "maxpool3d")
    }

    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: T, mode: NormMode) -> Result<Var> {
        let (out, cache) = ops::instance_norm_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            eps,
            mode,
        )?;
        let rg = self.rg(&[input, gamma, beta]);
        self.push(out, Op::Norm { input, gamma, beta, cache }, rg, "instance_norm")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg, "relu")
    }

    /// Sigmoid clamped into `[1e-7, 1 - 1e-7]`.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(ops::sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        one_element(self.value(a), "div")?;
        one_element(self.value(b), "div")?;
        let out = Tensor::scalar(self.value(a).item() / self.value(b).item());
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Div(a, b), rg, "div")
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddConst(x), rg, "add_const")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg, "scale")
    }

    /// Sequential left-to-right sum of all elements.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::EmptyOutput("mean of an empty tensor".into()));
        }
        let out = Tensor::scalar(t.sum() / T::of(t.len() as f64));
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg, "mean")
    }

    /// Mean over the channel axis of a `[C, D, H, W]` tensor, giving `[1, D, H, W]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.channels()?;
        let [d, h, w] = t.spatial()?;
        let n = d * h * w;
        let mut out = vec![T::zero(); n];
        for ch in t.data().chunks(n) {
            for (o, &v) in out.iter_mut().zip(ch) {
                *o += v;
            }
        }
        let inv = T::one() / T::of(c as f64);
        for o in &mut out {
            *o *= inv;
        }
        let out = Tensor::new(vec![1, d, h, w], out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::ChannelMean(x), rg, "channel_mean")
    }

    /// `-pos_weight * log p - neg_weight * log(1 - p)` of a one-element
    /// probability, with `p` clamped into `[1e-7, 1 - 1e-7]` first.
    pub fn balanced_bce(&mut self, prob: Var, pos_weight: T, neg_weight: T) -> Result<Var> {
        one_element(self.value(prob), "balanced_bce")?;
        let p = ops::clamp_prob(self.value(prob).item());
        let out = Tensor::scalar(-pos_weight * p.libm_ln() - neg_weight * (T::one() - p).libm_ln());
        let rg = self.rg(&[prob]);
        self.push(out, Op::BalancedBce { prob, pos_weight, neg_weight }, rg, "balanced_bce")
    }

    /// Negative mean binary entropy of a map of probabilities (clamped).
    pub fn neg_entropy(&mut self, g: Var) -> Result<Var> {
        let t = self.value(g);
        if t.is_empty() {
            return Err(Error::EmptyOutput("entropy of an empty map".into()));
        }
        let mut acc = T::zero();
        for &v in t.data() {
            let p = ops::clamp_prob(v);
            acc += p * p.libm_ln() + (T::one() - p) * (T::one() - p).libm_ln();
        }
        let out = Tensor::scalar(acc / T::of(t.len() as f64));
        let rg = self.rg(&[g]);
        self.push(out, Op::NegEntropy(g), rg, "neg_entropy")
    }

    /// Reverse-mode gradients of a scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out_val = self.value(output);
        if !out_val.is_scalar() {
            return Err(Error::NotScalar(out_val.shape().to_vec()));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out_val.shape(), T::one()));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if !gy.all_finite() {
                return Err(Error::NonFinite("backward"));
            }
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Conv { input, kernel, bias, cache } => {
                    let (dx, dk, db) = ops::conv3d_backward(
                        cache,
                        self.value(*input),
                        self.value(*kernel),
                        &gy,
                        needs(*input),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads[input.0], dx);
                    }
                    if needs(*kernel) {
                        accumulate(&mut grads[kernel.0], dk);
                    }
                    if let Some(b) = bias {
                        if needs(*b) {
                            accumulate(&mut grads[b.0], db);
                        }
                    }
                }
                Op::MaxPool { input, argmax } => {
                    if needs(*input) {
                        let dx = ops::maxpool3d_backward(self.value(*input).shape(), argmax, &gy);
                        accumulate(&mut grads[input.0], dx);
                    }
                }
                Op::Norm { input, gamma, beta, cache } => {
                    let (dx, dg, db) =
                        ops::instance_norm_backward(cache, self.value(*input), self.value(*gamma), &gy);
                    if needs(*input) {
                        accumulate(&mut grads[input.0], dx);
                    }
                    if needs(*gamma) {
                        accumulate(&mut grads[gamma.0], dg);
                    }
                    if needs(*beta) {
                        accumulate(&mut grads[beta.0], db);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut dx = gy;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Sigmoid(x) => {
                    // Derivative taken at the (clamped) output value.
                    let mut dx = gy;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y * (T::one() - y);
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads[a.0], gy.clone());
                    }
                    if needs(*b) {
                        accumulate(&mut grads[b.0], gy);
                    }
                }
                Op::Mul(a, b) => {
                    for (src, dst) in [(*b, *a), (*a, *b)] {
                        if needs(dst) {
                            let mut d = gy.clone();
                            for (g, &v) in d.data_mut().iter_mut().zip(self.value(src).data()) {
                                *g *= v;
                            }
                            accumulate(&mut grads[dst.0], d);
                        }
                    }
                }
                Op::Div(a, b) => {
                    let g = gy.item();
                    let (av, bv) = (self.value(*a).item(), self.value(*b).item());
                    if needs(*a) {
                        let d = Tensor::full(self.value(*a).shape(), g / bv);
                        accumulate(&mut grads[a.0], d);
                    }
                    if needs(*b) {
                        let d = Tensor::full(self.value(*b).shape(), -g * av / (bv * bv));
                        accumulate(&mut grads[b.0], d);
                    }
                }
                Op::AddConst(x) => accumulate(&mut grads[x.0], gy),
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads[x.0], gy.map(|v| v * c));
                }
                Op::Sum(x) => {
                    let d = Tensor::full(self.value(*x).shape(), gy.item());
                    accumulate(&mut grads[x.0], d);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let d = Tensor::full(xv.shape(), gy.item() / T::of(xv.len() as f64));
                    accumulate(&mut grads[x.0], d);
                }
                Op::ChannelMean(x) => {
                    let xv = self.value(*x);
                    let c = xv.shape()[0];
                    let inv = T::one() / T::of(c as f64);
                    let mut d = Vec::with_capacity(xv.len());
                    for _ in 0..c {
                        d.extend(gy.data().iter().map(|&g| g * inv));
                    }
                    accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), d)?);
                }
                Op::BalancedBce { prob, pos_weight, neg_weight } => {
                    // The clamp is treated as the identity in the backward pass.
                    let p = ops::clamp_prob(self.value(*prob).item());
                    let d = gy.item() * (-*pos_weight / p + *neg_weight / (T::one() - p));
                    accumulate(&mut grads[prob.0], Tensor::full(self.value(*prob).shape(), d));
                }
                Op::NegEntropy(g) => {
                    let gv = self.value(*g);
                    let scale = gy.item() / T::of(gv.len() as f64);
                    let d = gv.map(|v| {
                        let p = ops::clamp_prob(v);
                        scale * (p.libm_ln() - (T::one() - p).libm_ln())
                    });
                    accumulate(&mut grads[g.0], d);
                }
            }
        }
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::NonFinite("backward"));
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}
