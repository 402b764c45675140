//! The [`Graph`] abstraction: one network definition, two execution modes.
//!
//! [`EvalGraph`] applies kernels directly and keeps nothing — encode/decode
//! inference runs tape-free. [`TrainGraph`] records every operation on an
//! explicit tape; `backward` replays it once in reverse topological order.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::tensor::{ops, Tensor};

/// A named, trainable tensor. Networks own their parameters; graphs look
/// them up by name so repeated use of one parameter maps to one tape leaf.
#[derive(Clone, Debug)]
pub struct Param {
    name: String,
    value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Param {
        Param {
            name: name.into(),
            value,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn set_value(&mut self, value: Tensor) {
        assert_eq!(
            self.value.shape(),
            value.shape(),
            "parameter {} shape change",
            self.name
        );
        self.value = value;
    }
}

pub trait Graph {
    type V: Clone;

    fn constant(&mut self, t: Tensor) -> Self::V;
    fn param(&mut self, p: &Param) -> Self::V;
    fn value(&self, v: &Self::V) -> Tensor;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn add_scalar(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;
    fn tanh(&mut self, a: &Self::V) -> Self::V;
    fn exp(&mut self, a: &Self::V) -> Self::V;
    fn ln(&mut self, a: &Self::V) -> Self::V;
    fn softplus(&mut self, a: &Self::V) -> Self::V;
    fn recip(&mut self, a: &Self::V) -> Self::V;
    fn clamp_min(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn std_normal_cdf(&mut self, a: &Self::V) -> Self::V;
    /// Round half away from zero; gradients pass through unchanged
    /// (straight-through estimator).
    fn ste_round(&mut self, a: &Self::V) -> Self::V;

    fn conv2d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        bias: Option<&Self::V>,
        stride: usize,
        padding: usize,
    ) -> Result<Self::V>;
    fn conv_transpose2d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        bias: Option<&Self::V>,
        stride: usize,
        padding: usize,
    ) -> Result<Self::V>;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn softmax(&mut self, a: &Self::V, axis: usize) -> Result<Self::V>;
    fn concat(&mut self, parts: &[Self::V], axis: usize) -> Result<Self::V>;
    fn slice_axis(&mut self, a: &Self::V, axis: usize, from: usize, to: usize) -> Result<Self::V>;
    fn avg_pool2d(&mut self, a: &Self::V, k: usize) -> Result<Self::V>;
    fn reshape(&mut self, a: &Self::V, shape: &[usize]) -> Result<Self::V>;
    fn permute(&mut self, a: &Self::V, axes: &[usize]) -> Result<Self::V>;
    fn sum(&mut self, a: &Self::V) -> Self::V;
    fn mean(&mut self, a: &Self::V) -> Self::V;

    fn shape(&self, v: &Self::V) -> Vec<usize>;
}

// ---------------------------------------------------------------------------
// Tape-free evaluation
// ---------------------------------------------------------------------------

/// Direct evaluation; values are plain tensors, nothing is retained.
#[derive(Default)]
pub struct EvalGraph;

impl EvalGraph {
    pub fn new() -> EvalGraph {
        EvalGraph
    }
}

impl Graph for EvalGraph {
    type V = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn param(&mut self, p: &Param) -> Tensor {
        p.value().clone()
    }
    fn value(&self, v: &Tensor) -> Tensor {
        v.clone()
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::add(a, b)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::sub(a, b)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::mul(a, b)
    }
    fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        ops::scale(a, c)
    }
    fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        ops::add_scalar(a, c)
    }
    fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        ops::sigmoid(a)
    }
    fn tanh(&mut self, a: &Tensor) -> Tensor {
        ops::tanh(a)
    }
    fn exp(&mut self, a: &Tensor) -> Tensor {
        ops::exp(a)
    }
    fn ln(&mut self, a: &Tensor) -> Tensor {
        ops::ln(a)
    }
    fn softplus(&mut self, a: &Tensor) -> Tensor {
        ops::softplus(a)
    }
    fn recip(&mut self, a: &Tensor) -> Tensor {
        ops::recip(a)
    }
    fn clamp_min(&mut self, a: &Tensor, c: f64) -> Tensor {
        ops::clamp_min(a, c)
    }
    fn std_normal_cdf(&mut self, a: &Tensor) -> Tensor {
        ops::std_normal_cdf(a)
    }
    fn ste_round(&mut self, a: &Tensor) -> Tensor {
        ops::ste_round(a)
    }

    fn conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        ops::conv2d(x, w, bias, stride, padding)
    }
    fn conv_transpose2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        ops::conv_transpose2d(x, w, bias, stride, padding)
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::matmul(a, b)
    }
    fn softmax(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        ops::softmax(a, axis)
    }
    fn concat(&mut self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        ops::concat(&refs, axis)
    }
    fn slice_axis(&mut self, a: &Tensor, axis: usize, from: usize, to: usize) -> Result<Tensor> {
        ops::slice_axis(a, axis, from, to)
    }
    fn avg_pool2d(&mut self, a: &Tensor, k: usize) -> Result<Tensor> {
        ops::avg_pool2d(a, k)
    }
    fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        ops::reshape(a, shape)
    }
    fn permute(&mut self, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        ops::permute(a, axes)
    }
    fn sum(&mut self, a: &Tensor) -> Tensor {
        ops::sum(a)
    }
    fn mean(&mut self, a: &Tensor) -> Tensor {
        ops::mean(a)
    }

    fn shape(&self, v: &Tensor) -> Vec<usize> {
        v.shape().to_vec()
    }
}

// ---------------------------------------------------------------------------
// Recorded execution
// ---------------------------------------------------------------------------

/// Handle to a value on a [`TrainGraph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId),
    Sigmoid(VarId),
    Tanh(VarId),
    Exp(VarId),
    Ln(VarId),
    Softplus(VarId),
    Recip(VarId),
    ClampMin(VarId, f64),
    StdNormalCdf(VarId),
    SteRound(VarId),
    Conv2d {
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        stride: usize,
        padding: usize,
    },
    Matmul(VarId, VarId),
    Softmax(VarId, usize),
    Concat(Vec<VarId>, usize),
    SliceAxis {
        a: VarId,
        axis: usize,
        from: usize,
    },
    AvgPool2d(VarId, usize),
    Reshape(VarId),
    Permute(VarId, Vec<usize>),
    Sum(VarId),
    Mean(VarId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Explicit single-threaded tape. Nodes are appended in execution order, so
/// index order is a topological order; `backward` visits each node exactly
/// once in reverse.
#[derive(Default)]
pub struct TrainGraph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: HashMap<String, VarId>,
    ste_rounds: usize,
}

impl TrainGraph {
    pub fn new() -> TrainGraph {
        TrainGraph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded nodes, gradients and parameter bindings.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.params.clear();
        self.ste_rounds = 0;
    }

    /// Whether the tape contains straight-through rounding. Such graphs are
    /// not finite-difference checkable: the numeric derivative of a step
    /// function is zero almost everywhere while the straight-through
    /// estimator reports one.
    pub fn has_ste_round(&self) -> bool {
        self.ste_rounds > 0
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> VarId {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn rg(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn val(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn unary(&mut self, a: VarId, value: Tensor, op: Op) -> VarId {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: VarId, b: VarId, value: Tensor, op: Op) -> VarId {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    /// Seed the output with ones and accumulate gradients down the tape.
    pub fn backward(&mut self, out: VarId) -> Result<()> {
        let out_shape = {
            let out_t = self.val(out);
            if !out_t.is_finite() {
                return Err(TensorError::NonFinite("backward seed".into()));
            }
            out_t.shape().to_vec()
        };
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(Tensor::ones(&out_shape));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].clone() else {
                continue;
            };
            self.propagate(VarId(i), &g)?;
        }
        Ok(())
    }

    /// Gradient of the last `backward` output w.r.t. `id`, if it was reached.
    pub fn grad(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn param_id(&self, name: &str) -> Option<VarId> {
        self.params.get(name).copied()
    }

    pub fn param_grad(&self, name: &str) -> Option<&Tensor> {
        self.param_id(name).and_then(|id| self.grad(id))
    }

    fn accumulate(&mut self, id: VarId, g: Tensor) {
        if !self.rg(id) {
            return;
        }
        match &mut self.grads[id.0] {
            Some(existing) => {
                *existing = ops::add(existing, &g).expect("gradient shape");
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, id: VarId, g: &Tensor) -> Result<()> {
        let op = self.nodes[id.0].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                let gb = ops::reduce_to_shape(g, &self.shape_of(b));
                self.accumulate(b, gb);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                let gb = ops::reduce_to_shape(&ops::scale(g, -1.0), &self.shape_of(b));
                self.accumulate(b, gb);
            }
            Op::Mul(a, b) => {
                // g has the lhs shape; the rhs broadcast repeats in each branch
                let av = self.val(a).clone();
                let bv = self.val(b).clone();
                self.accumulate(a, ops::mul(g, &bv)?);
                let gb = ops::reduce_to_shape(&ops::mul(g, &av)?, &self.shape_of(b));
                self.accumulate(b, gb);
            }
            Op::Scale(a, c) => self.accumulate(a, ops::scale(g, c)),
            Op::AddScalar(a) => self.accumulate(a, g.clone()),
            Op::Sigmoid(a) => {
                let s = self.val(id).clone();
                let one_minus = s.map(|v| 1.0 - v);
                let d = ops::mul(&s, &one_minus)?;
                self.accumulate(a, ops::mul(g, &d)?);
            }
            Op::Tanh(a) => {
                let t = self.val(id).clone();
                let d = t.map(|v| 1.0 - v * v);
                self.accumulate(a, ops::mul(g, &d)?);
            }
            Op::Exp(a) => {
                let e = self.val(id).clone();
                self.accumulate(a, ops::mul(g, &e)?);
            }
            Op::Ln(a) => {
                let x = self.val(a).clone();
                self.accumulate(a, ops::mul(g, &ops::recip(&x))?);
            }
            Op::Softplus(a) => {
                let x = self.val(a).clone();
                self.accumulate(a, ops::mul(g, &ops::sigmoid(&x))?);
            }
            Op::Recip(a) => {
                let y = self.val(id).clone();
                let d = ops::mul(&y, &y)?;
                self.accumulate(a, ops::scale(&ops::mul(g, &d)?, -1.0));
            }
            Op::ClampMin(a, c) => {
                let x = self.val(a).clone();
                let mask = x.map(|v| if v > c { 1.0 } else { 0.0 });
                self.accumulate(a, ops::mul(g, &mask)?);
            }
            Op::StdNormalCdf(a) => {
                let x = self.val(a).clone();
                let d = x.map(ops::std_normal_pdf_scalar);
                self.accumulate(a, ops::mul(g, &d)?);
            }
            Op::SteRound(a) => self.accumulate(a, g.clone()),
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                padding,
            } => {
                let xv = self.val(x).clone();
                let wv = self.val(w).clone();
                if self.rg(x) {
                    let gx = ops::conv2d_grad_input(g, &wv, xv.shape(), stride, padding);
                    self.accumulate(x, gx);
                }
                if self.rg(w) {
                    let gw = ops::conv2d_grad_weight(g, &xv, wv.shape(), stride, padding);
                    self.accumulate(w, gw);
                }
                if let Some(b) = bias {
                    if self.rg(b) {
                        self.accumulate(b, ops::grad_bias(g));
                    }
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                bias,
                stride,
                padding,
            } => {
                let xv = self.val(x).clone();
                let wv = self.val(w).clone();
                if self.rg(x) {
                    let gx = ops::conv_transpose2d_grad_input(g, &wv, xv.shape(), stride, padding);
                    self.accumulate(x, gx);
                }
                if self.rg(w) {
                    let gw =
                        ops::conv_transpose2d_grad_weight(g, &xv, wv.shape(), stride, padding);
                    self.accumulate(w, gw);
                }
                if let Some(b) = bias {
                    if self.rg(b) {
                        self.accumulate(b, ops::grad_bias(g));
                    }
                }
            }
            Op::Matmul(a, b) => {
                let av = self.val(a).clone();
                let bv = self.val(b).clone();
                if self.rg(a) {
                    self.accumulate(a, ops::matmul(g, &ops::transpose2(&bv))?);
                }
                if self.rg(b) {
                    self.accumulate(b, ops::matmul(&ops::transpose2(&av), g)?);
                }
            }
            Op::Softmax(a, axis) => {
                let s = self.val(id).clone();
                self.accumulate(a, ops::softmax_vjp(&s, g, axis));
            }
            Op::Concat(parts, axis) => {
                let mut from = 0;
                for p in parts {
                    let len = self.shape_of(p)[axis];
                    let gp = ops::slice_axis(g, axis, from, from + len)?;
                    self.accumulate(p, gp);
                    from += len;
                }
            }
            Op::SliceAxis { a, axis, from } => {
                let parent_shape = self.shape_of(a);
                self.accumulate(a, ops::slice_axis_vjp(g, &parent_shape, axis, from));
            }
            Op::AvgPool2d(a, k) => {
                let in_shape = self.shape_of(a);
                self.accumulate(a, ops::avg_pool2d_vjp(g, &in_shape, k));
            }
            Op::Reshape(a) => {
                let in_shape = self.shape_of(a);
                self.accumulate(a, ops::reshape(g, &in_shape)?);
            }
            Op::Permute(a, axes) => {
                let inv = ops::inverse_permutation(&axes);
                self.accumulate(a, ops::permute(g, &inv)?);
            }
            Op::Sum(a) => {
                let in_shape = self.shape_of(a);
                self.accumulate(a, Tensor::full(&in_shape, g.item()));
            }
            Op::Mean(a) => {
                let in_shape = self.shape_of(a);
                let n: usize = in_shape.iter().product();
                self.accumulate(a, Tensor::full(&in_shape, g.item() / n as f64));
            }
        }
        Ok(())
    }

    fn shape_of(&self, id: VarId) -> Vec<usize> {
        self.val(id).shape().to_vec()
    }
}

impl Graph for TrainGraph {
    type V = VarId;

    fn constant(&mut self, t: Tensor) -> VarId {
        self.push(t, Op::Leaf, false)
    }

    fn param(&mut self, p: &Param) -> VarId {
        if let Some(&id) = self.params.get(p.name()) {
            return id;
        }
        let id = self.push(p.value().clone(), Op::Leaf, true);
        self.params.insert(p.name().to_string(), id);
        id
    }

    fn value(&self, v: &VarId) -> Tensor {
        self.val(*v).clone()
    }

    fn add(&mut self, a: &VarId, b: &VarId) -> Result<VarId> {
        let v = ops::add(self.val(*a), self.val(*b))?;
        Ok(self.binary(*a, *b, v, Op::Add(*a, *b)))
    }
    fn sub(&mut self, a: &VarId, b: &VarId) -> Result<VarId> {
        let v = ops::sub(self.val(*a), self.val(*b))?;
        Ok(self.binary(*a, *b, v, Op::Sub(*a, *b)))
    }
    fn mul(&mut self, a: &VarId, b: &VarId) -> Result<VarId> {
        let v = ops::mul(self.val(*a), self.val(*b))?;
        Ok(self.binary(*a, *b, v, Op::Mul(*a, *b)))
    }
    fn scale(&mut self, a: &VarId, c: f64) -> VarId {
        let v = ops::scale(self.val(*a), c);
        self.unary(*a, v, Op::Scale(*a, c))
    }
    fn add_scalar(&mut self, a: &VarId, c: f64) -> VarId {
        let v = ops::add_scalar(self.val(*a), c);
        self.unary(*a, v, Op::AddScalar(*a))
    }
    fn sigmoid(&mut self, a: &VarId) -> VarId {
        let v = ops::sigmoid(self.val(*a));
        self.unary(*a, v, Op::Sigmoid(*a))
    }
    fn tanh(&mut self, a: &VarId) -> VarId {
        let v = ops::tanh(self.val(*a));
        self.unary(*a, v, Op::Tanh(*a))
    }
    fn exp(&mut self, a: &VarId) -> VarId {
        let v = ops::exp(self.val(*a));
        self.unary(*a, v, Op::Exp(*a))
    }
    fn ln(&mut self, a: &VarId) -> VarId {
        let v = ops::ln(self.val(*a));
        self.unary(*a, v, Op::Ln(*a))
    }
    fn softplus(&mut self, a: &VarId) -> VarId {
        let v = ops::softplus(self.val(*a));
        self.unary(*a, v, Op::Softplus(*a))
    }
    fn recip(&mut self, a: &VarId) -> VarId {
        let v = ops::recip(self.val(*a));
        self.unary(*a, v, Op::Recip(*a))
    }
    fn clamp_min(&mut self, a: &VarId, c: f64) -> VarId {
        let v = ops::clamp_min(self.val(*a), c);
        self.unary(*a, v, Op::ClampMin(*a, c))
    }
    fn std_normal_cdf(&mut self, a: &VarId) -> VarId {
        let v = ops::std_normal_cdf(self.val(*a));
        self.unary(*a, v, Op::StdNormalCdf(*a))
    }
    fn ste_round(&mut self, a: &VarId) -> VarId {
        self.ste_rounds += 1;
        let v = ops::ste_round(self.val(*a));
        self.unary(*a, v, Op::SteRound(*a))
    }

    fn conv2d(
        &mut self,
        x: &VarId,
        w: &VarId,
        bias: Option<&VarId>,
        stride: usize,
        padding: usize,
    ) -> Result<VarId> {
        let bv = bias.map(|b| self.val(*b).clone());
        let v = ops::conv2d(self.val(*x), self.val(*w), bv.as_ref(), stride, padding)?;
        let rg = self.rg(*x) || self.rg(*w) || bias.is_some_and(|b| self.rg(*b));
        Ok(self.push(
            v,
            Op::Conv2d {
                x: *x,
                w: *w,
                bias: bias.copied(),
                stride,
                padding,
            },
            rg,
        ))
    }

    fn conv_transpose2d(
        &mut self,
        x: &VarId,
        w: &VarId,
        bias: Option<&VarId>,
        stride: usize,
        padding: usize,
    ) -> Result<VarId> {
        let bv = bias.map(|b| self.val(*b).clone());
        let v = ops::conv_transpose2d(self.val(*x), self.val(*w), bv.as_ref(), stride, padding)?;
        let rg = self.rg(*x) || self.rg(*w) || bias.is_some_and(|b| self.rg(*b));
        Ok(self.push(
            v,
            Op::ConvTranspose2d {
                x: *x,
                w: *w,
                bias: bias.copied(),
                stride,
                padding,
            },
            rg,
        ))
    }

    fn matmul(&mut self, a: &VarId, b: &VarId) -> Result<VarId> {
        let v = ops::matmul(self.val(*a), self.val(*b))?;
        Ok(self.binary(*a, *b, v, Op::Matmul(*a, *b)))
    }
    fn softmax(&mut self, a: &VarId, axis: usize) -> Result<VarId> {
        let v = ops::softmax(self.val(*a), axis)?;
        Ok(self.unary(*a, v, Op::Softmax(*a, axis)))
    }
    fn concat(&mut self, parts: &[VarId], axis: usize) -> Result<VarId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
        let v = ops::concat(&tensors, axis)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), rg))
    }
    fn slice_axis(&mut self, a: &VarId, axis: usize, from: usize, to: usize) -> Result<VarId> {
        let v = ops::slice_axis(self.val(*a), axis, from, to)?;
        Ok(self.unary(*a, v, Op::SliceAxis { a: *a, axis, from }))
    }
    fn avg_pool2d(&mut self, a: &VarId, k: usize) -> Result<VarId> {
        let v = ops::avg_pool2d(self.val(*a), k)?;
        Ok(self.unary(*a, v, Op::AvgPool2d(*a, k)))
    }
    fn reshape(&mut self, a: &VarId, shape: &[usize]) -> Result<VarId> {
        let v = ops::reshape(self.val(*a), shape)?;
        Ok(self.unary(*a, v, Op::Reshape(*a)))
    }
    fn permute(&mut self, a: &VarId, axes: &[usize]) -> Result<VarId> {
        let v = ops::permute(self.val(*a), axes)?;
        Ok(self.unary(*a, v, Op::Permute(*a, axes.to_vec())))
    }
    fn sum(&mut self, a: &VarId) -> VarId {
        let v = ops::sum(self.val(*a));
        self.unary(*a, v, Op::Sum(*a))
    }
    fn mean(&mut self, a: &VarId) -> VarId {
        let v = ops::mean(self.val(*a));
        self.unary(*a, v, Op::Mean(*a))
    }

    fn shape(&self, v: &VarId) -> Vec<usize> {
        self.shape_of(*v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = TrainGraph::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]), true);
        let sq = g.mul(&x, &x).unwrap();
        let loss = g.sum(&sq);
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        assert_eq!(grad.data(), &[2.0, 4.0]);
    }

    #[test]
    fn param_reuse_accumulates() {
        // y = p + p should give dy/dp = 2
        let p = Param::new("p", Tensor::scalar(3.0));
        let mut g = TrainGraph::new();
        let a = g.param(&p);
        let b = g.param(&p);
        assert_eq!(a, b);
        let y = g.add(&a, &b).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.param_grad("p").unwrap().data(), &[2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = TrainGraph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(&x, &c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[5.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn ste_round_passes_gradient() {
        let mut g = TrainGraph::new();
        let x = g.leaf(Tensor::scalar(1.4), true);
        let r = g.ste_round(&x);
        assert_eq!(g.value(&r).item(), 1.0);
        let y = g.scale(&r, 3.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn clear_frees_tape() {
        let mut g = TrainGraph::new();
        g.leaf(Tensor::zeros(&[8]), true);
        assert_eq!(g.len(), 1);
        g.clear();
        assert!(g.is_empty());
    }
}
