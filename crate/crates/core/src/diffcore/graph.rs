//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built once from primitive ops, then evaluated with
//! [`Graph::forward`] against a [`Feed`] of named tensors. Intermediate values
//! are kept so that [`Graph::backward`] can propagate a seed gradient back to
//! every parameter leaf.

use std::collections::HashMap;

use super::params::ParamSet;
use super::tensor::{log_sum_exp, softmax_in_place, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Exp,
    Log,
}

#[derive(Clone, Debug)]
enum Op {
    Input {
        name: String,
        shape: Vec<usize>,
        param: bool,
    },
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// rank-2 plus a row vector added to every row
    AddBias(NodeId, NodeId),
    /// rank-2 times a column vector, one factor per row
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    RowSoftmax(NodeId),
    ChannelSoftmax(NodeId),
    /// row-wise `x − log Σ exp(x)`
    LogSoftmax(NodeId),
    MeanPoolRows(NodeId, usize),
    Unary(NodeId, Unary),
    Clamp(NodeId, f64, f64),
    Minimum(NodeId, NodeId),
    ConcatRows(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    /// `(n×c)` channels picked by a `(g×n)` integer mask → `(g×n)`
    ChannelPick(NodeId, NodeId),
    /// `x[:,1] − x[:,0]` for a two-channel tensor
    ChannelDiff(NodeId),
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::RowSoftmax(..) => "row_softmax",
            Op::ChannelSoftmax(..) => "channel_softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::MeanPoolRows(..) => "mean_pool_rows",
            Op::Unary(..) => "unary",
            Op::Clamp(..) => "clamp",
            Op::Minimum(..) => "minimum",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::ChannelPick(..) => "channel_pick",
            Op::ChannelDiff(..) => "channel_diff",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

/// Named tensors bound to a graph's input leaves for one evaluation.
#[derive(Default)]
pub struct Feed<'a> {
    tensors: HashMap<&'a str, &'a Tensor>,
}

impl<'a> Feed<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &'a str, tensor: &'a Tensor) -> &mut Self {
        self.tensors.insert(name, tensor);
        self
    }

    pub fn with_params(mut self, params: &'a ParamSet) -> Self {
        for (name, tensor) in params.iter() {
            self.tensors.insert(name, tensor);
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.tensors.get(name).copied()
    }
}

#[derive(Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Option<Tensor>>,
    output: Option<NodeId>,
}

fn shape_err(node: usize, op: &Op, detail: impl Into<String>) -> Error {
    Error::Shape {
        node,
        op: op.name(),
        detail: detail.into(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.ops.push(op);
        self.values.push(None);
        NodeId(self.ops.len() - 1)
    }

    /// Constant input leaf. Gradients are not reported for it.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Input {
            name: name.to_owned(),
            shape: shape.to_vec(),
            param: false,
        })
    }

    /// Trainable leaf; [`Graph::backward`] reports its gradient under `name`.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Input {
            name: name.to_owned(),
            shape: shape.to_vec(),
            param: true,
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(a, bias))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        self.push(Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowSoftmax(a))
    }

    pub fn channel_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ChannelSoftmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }

    /// Averages consecutive groups of `group` rows: `(t·group × d) → (t × d)`.
    pub fn mean_pool_rows(&mut self, a: NodeId, group: usize) -> NodeId {
        self.push(Op::MeanPoolRows(a, group))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Unary(a, Unary::Tanh))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Unary(a, Unary::Exp))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Unary(a, Unary::Log))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Op::Clamp(a, lo, hi))
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Minimum(a, b))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatRows(a, b))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::SliceRows(a, start, end))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        self.push(Op::GatherRows(a, indices))
    }

    /// `out[i, j] = x[j, mask[i, j]]`; the mask holds channel indices as reals.
    pub fn channel_pick(&mut self, x: NodeId, mask: NodeId) -> NodeId {
        self.push(Op::ChannelPick(x, mask))
    }

    pub fn channel_diff(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ChannelDiff(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Names of trainable leaves, in declaration order.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.ops.iter().filter_map(|op| match op {
            Op::Input {
                name, param: true, ..
            } => Some(name.as_str()),
            _ => None,
        })
    }

    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.values.get(node.0).and_then(Option::as_ref)
    }

    /// Evaluates every node; returns the output node's value.
    pub fn forward(&mut self, feed: &Feed<'_>) -> Result<&Tensor> {
        let output = self
            .output
            .ok_or_else(|| Error::invalid("graph has no output node"))?;
        for i in 0..self.ops.len() {
            let value = self.eval_node(i, feed)?;
            self.values[i] = Some(value);
        }
        Ok(self.values[output.0].as_ref().expect("evaluated"))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0]
            .as_ref()
            .expect("inputs precede their consumers")
    }

    fn eval_node(&self, i: usize, feed: &Feed<'_>) -> Result<Tensor> {
        let op = &self.ops[i];
        let rank2 = |t: &Tensor, what: &str| -> Result<()> {
            if t.rank() != 2 {
                return Err(shape_err(
                    i,
                    op,
                    format!("{what} must be rank 2, got {:?}", t.shape()),
                ));
            }
            Ok(())
        };
        let same = |a: &Tensor, b: &Tensor| -> Result<()> {
            if a.shape() != b.shape() {
                return Err(shape_err(
                    i,
                    op,
                    format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
                ));
            }
            Ok(())
        };
        Ok(match op {
            Op::Input { name, shape, .. } => {
                let t = feed
                    .get(name)
                    .ok_or_else(|| Error::MissingInput(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(shape_err(
                        i,
                        op,
                        format!("`{name}` declared {:?}, bound {:?}", shape, t.shape()),
                    ));
                }
                t.clone()
            }
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                rank2(a, "lhs")?;
                rank2(b, "rhs")?;
                if a.cols() != b.rows() {
                    return Err(shape_err(
                        i,
                        op,
                        format!("{:?} · {:?}", a.shape(), b.shape()),
                    ));
                }
                a.matmul_unchecked(b)
            }
            Op::MatMulT(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                rank2(a, "lhs")?;
                rank2(b, "rhs")?;
                if a.cols() != b.cols() {
                    return Err(shape_err(
                        i,
                        op,
                        format!("{:?} · {:?}ᵀ", a.shape(), b.shape()),
                    ));
                }
                a.matmul_t_unchecked(b)
            }
            Op::Transpose(a) => {
                let a = self.val(*a);
                rank2(a, "operand")?;
                a.transpose()
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Minimum(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                same(x, y)?;
                match op {
                    Op::Add(..) => x.zip_map(y, |p, q| p + q),
                    Op::Sub(..) => x.zip_map(y, |p, q| p - q),
                    Op::Mul(..) => x.zip_map(y, |p, q| p * q),
                    _ => x.zip_map(y, f64::min),
                }
            }
            Op::AddBias(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                rank2(a, "lhs")?;
                if b.rank() != 1 || b.len() != a.cols() {
                    return Err(shape_err(
                        i,
                        op,
                        format!("bias {:?} for {:?}", b.shape(), a.shape()),
                    ));
                }
                let mut out = a.clone();
                for r in 0..out.rows() {
                    for (o, bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                out
            }
            Op::MulCol(a, v) => {
                let (a, v) = (self.val(*a), self.val(*v));
                rank2(a, "lhs")?;
                if v.rank() != 1 || v.len() != a.rows() {
                    return Err(shape_err(
                        i,
                        op,
                        format!("column {:?} for {:?}", v.shape(), a.shape()),
                    ));
                }
                let mut out = a.clone();
                for r in 0..out.rows() {
                    let f = v.data()[r];
                    out.row_mut(r).iter_mut().for_each(|o| *o *= f);
                }
                out
            }
            Op::Scale(a, f) => self.val(*a).map(|v| v * f),
            Op::RowSoftmax(a) | Op::ChannelSoftmax(a) => {
                let a = self.val(*a);
                rank2(a, "operand")?;
                if a.cols() == 0 {
                    return Err(shape_err(i, op, "softmax over an empty axis"));
                }
                let mut out = a.clone();
                for r in 0..out.rows() {
                    softmax_in_place(out.row_mut(r));
                }
                out
            }
            Op::LogSoftmax(a) => {
                let a = self.val(*a);
                rank2(a, "operand")?;
                if a.cols() == 0 {
                    return Err(shape_err(i, op, "softmax over an empty axis"));
                }
                let mut out = a.clone();
                for r in 0..out.rows() {
                    let lse = log_sum_exp(out.row(r));
                    out.row_mut(r).iter_mut().for_each(|v| *v -= lse);
                }
                out
            }
            Op::MeanPoolRows(a, group) => {
                let a = self.val(*a);
                rank2(a, "operand")?;
                if *group == 0 || a.rows() % group != 0 {
                    return Err(shape_err(
                        i,
                        op,
                        format!("{} rows do not split into groups of {group}", a.rows()),
                    ));
                }
                let (groups, cols) = (a.rows() / group, a.cols());
                let mut data = vec![0.0; groups * cols];
                for r in 0..a.rows() {
                    let g = r / group;
                    for (o, v) in data[g * cols..(g + 1) * cols].iter_mut().zip(a.row(r)) {
                        *o += v;
                    }
                }
                let inv = 1.0 / *group as f64;
                data.iter_mut().for_each(|v| *v *= inv);
                Tensor::matrix(groups, cols, data)?
            }
            Op::Unary(a, u) => {
                let a = self.val(*a);
                match u {
                    Unary::Tanh => a.map(f64::tanh),
                    Unary::Exp => a.map(f64::exp),
                    Unary::Log => a.map(f64::ln),
                }
            }
            Op::Clamp(a, lo, hi) => self.val(*a).map(|v| v.clamp(*lo, *hi)),
            Op::ConcatRows(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                rank2(a, "top")?;
                rank2(b, "bottom")?;
                if a.cols() != b.cols() {
                    return Err(shape_err(
                        i,
                        op,
                        format!("{:?} over {:?}", a.shape(), b.shape()),
                    ));
                }
                let mut data = a.data().to_vec();
                data.extend_from_slice(b.data());
                Tensor::matrix(a.rows() + b.rows(), a.cols(), data)?
            }
            Op::SliceRows(a, start, end) => {
                let a = self.val(*a);
                rank2(a, "operand")?;
                if start > end || *end > a.rows() {
                    return Err(shape_err(
                        i,
                        op,
                        format!("rows {start}..{end} of {:?}", a.shape()),
                    ));
                }
                let c = a.cols();
                Tensor::matrix(end - start, c, a.data()[start * c..end * c].to_vec())?
            }
            Op::GatherRows(a, idx) => {
                let a = self.val(*a);
                rank2(a, "operand")?;
                if let Some(bad) = idx.iter().find(|&&r| r >= a.rows()) {
                    return Err(shape_err(i, op, format!("row {bad} of {:?}", a.shape())));
                }
                a.gather_rows(idx)
            }
            Op::ChannelPick(x, mask) => {
                let (x, mask) = (self.val(*x), self.val(*mask));
                rank2(x, "logits")?;
                rank2(mask, "mask")?;
                if mask.cols() != x.rows() {
                    return Err(shape_err(
                        i,
                        op,
                        format!("mask {:?} for logits {:?}", mask.shape(), x.shape()),
                    ));
                }
                let mut out = Vec::with_capacity(mask.len());
                for g in 0..mask.rows() {
                    for (j, &c) in mask.row(g).iter().enumerate() {
                        let c = channel_of(c, x.cols()).ok_or_else(|| {
                            shape_err(i, op, format!("channel {c} of {:?}", x.shape()))
                        })?;
                        out.push(x.at(j, c));
                    }
                }
                Tensor::matrix(mask.rows(), mask.cols(), out)?
            }
            Op::ChannelDiff(a) => {
                let a = self.val(*a);
                rank2(a, "operand")?;
                if a.cols() != 2 {
                    return Err(shape_err(
                        i,
                        op,
                        format!("expected 2 channels, got {:?}", a.shape()),
                    ));
                }
                Tensor::vector((0..a.rows()).map(|r| a.at(r, 1) - a.at(r, 0)).collect())
            }
            Op::Sum(a) => Tensor::scalar(self.val(*a).data().iter().sum()),
            Op::Mean(a) => {
                let a = self.val(*a);
                if a.is_empty() {
                    return Err(shape_err(i, op, "mean of an empty tensor"));
                }
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
        })
    }

    /// Propagates `seed` (shaped like the output) back through the graph and
    /// returns one gradient per parameter leaf.
    pub fn backward(&self, seed: &Tensor) -> Result<ParamSet> {
        let output = self
            .output
            .ok_or_else(|| Error::invalid("graph has no output node"))?;
        if self.values.iter().any(Option::is_none) {
            return Err(Error::BackwardBeforeForward);
        }
        let out_shape = self.val(output).shape();
        if seed.shape() != out_shape {
            return Err(Error::Shape {
                node: output.0,
                op: "seed",
                detail: format!("seed {:?} for output {:?}", seed.shape(), out_shape),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.ops.len()];
        grads[output.0] = Some(seed.clone());

        for i in (0..=output.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }

        let mut out = ParamSet::new();
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Input {
                name,
                shape,
                param: true,
            } = op
            {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(shape));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], id: NodeId, g: Tensor| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        match &self.ops[i] {
            Op::Input { .. } => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(grads, *a, dy.matmul_t_unchecked(bv));
                acc(grads, *b, av.transpose().matmul_unchecked(dy));
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(grads, *a, dy.matmul_unchecked(bv));
                acc(grads, *b, dy.transpose().matmul_unchecked(av));
            }
            Op::Transpose(a) => acc(grads, *a, dy.transpose()),
            Op::Add(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(grads, *a, dy.zip_map(bv, |g, y| g * y));
                acc(grads, *b, dy.zip_map(av, |g, x| g * x));
            }
            Op::AddBias(a, b) => {
                acc(grads, *a, dy.clone());
                let mut db = vec![0.0; dy.cols()];
                for r in 0..dy.rows() {
                    for (d, g) in db.iter_mut().zip(dy.row(r)) {
                        *d += g;
                    }
                }
                acc(grads, *b, Tensor::vector(db));
            }
            Op::MulCol(a, v) => {
                let (av, vv) = (self.val(*a), self.val(*v));
                let mut da = dy.clone();
                let mut dv = vec![0.0; vv.len()];
                for r in 0..dy.rows() {
                    let f = vv.data()[r];
                    da.row_mut(r).iter_mut().for_each(|g| *g *= f);
                    dv[r] = dy.row(r).iter().zip(av.row(r)).map(|(g, x)| g * x).sum();
                }
                acc(grads, *a, da);
                acc(grads, *v, Tensor::vector(dv));
            }
            Op::Scale(a, f) => acc(grads, *a, dy.map(|g| g * f)),
            Op::RowSoftmax(a) | Op::ChannelSoftmax(a) => {
                let y = self.values[i].as_ref().expect("forward ran");
                let mut dx = dy.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for ((d, &p), &g) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = p * (g - dot);
                    }
                }
                acc(grads, *a, dx);
            }
            Op::LogSoftmax(a) => {
                let y = self.values[i].as_ref().expect("forward ran");
                let mut dx = dy.clone();
                for r in 0..y.rows() {
                    let total: f64 = dy.row(r).iter().sum();
                    for (d, &ly) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *d -= ly.exp() * total;
                    }
                }
                acc(grads, *a, dx);
            }
            Op::MeanPoolRows(a, group) => {
                let av = self.val(*a);
                let inv = 1.0 / *group as f64;
                let mut dx = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    let src = dy.row(r / group);
                    for (d, g) in dx.row_mut(r).iter_mut().zip(src) {
                        *d = g * inv;
                    }
                }
                acc(grads, *a, dx);
            }
            Op::Unary(a, u) => {
                let y = self.values[i].as_ref().expect("forward ran");
                let dx = match u {
                    Unary::Tanh => dy.zip_map(y, |g, t| g * (1.0 - t * t)),
                    Unary::Exp => dy.zip_map(y, |g, e| g * e),
                    Unary::Log => dy.zip_map(self.val(*a), |g, x| g / x),
                };
                acc(grads, *a, dx);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.val(*a);
                acc(
                    grads,
                    *a,
                    dy.zip_map(x, |g, v| if v < *lo || v > *hi { 0.0 } else { g }),
                );
            }
            Op::Minimum(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let mut da = dy.clone();
                let mut db = dy.clone();
                for ((ga, gb), (&p, &q)) in da
                    .data_mut()
                    .iter_mut()
                    .zip(db.data_mut())
                    .zip(x.data().iter().zip(y.data()))
                {
                    // ties route to the first operand
                    if p <= q {
                        *gb = 0.0;
                    } else {
                        *ga = 0.0;
                    }
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::ConcatRows(a, b) => {
                let split = self.val(*a).len();
                let (ra, rb) = (self.val(*a).rows(), self.val(*b).rows());
                let c = dy.cols();
                let top = Tensor::matrix(ra, c, dy.data()[..split].to_vec()).expect("shape");
                let bottom = Tensor::matrix(rb, c, dy.data()[split..].to_vec()).expect("shape");
                acc(grads, *a, top);
                acc(grads, *b, bottom);
            }
            Op::SliceRows(a, start, _) => {
                let av = self.val(*a);
                let mut dx = Tensor::zeros(av.shape());
                let c = av.cols();
                dx.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                acc(grads, *a, dx);
            }
            Op::GatherRows(a, idx) => {
                let av = self.val(*a);
                let mut dx = Tensor::zeros(av.shape());
                for (k, &r) in idx.iter().enumerate() {
                    for (d, g) in dx.row_mut(r).iter_mut().zip(dy.row(k)) {
                        *d += g;
                    }
                }
                acc(grads, *a, dx);
            }
            Op::ChannelPick(x, mask) => {
                let (xv, mv) = (self.val(*x), self.val(*mask));
                let mut dx = Tensor::zeros(xv.shape());
                let c = xv.cols();
                for g in 0..mv.rows() {
                    for (j, (&m, &gr)) in mv.row(g).iter().zip(dy.row(g)).enumerate() {
                        let ch = channel_of(m, c).expect("validated in forward");
                        dx.data_mut()[j * c + ch] += gr;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::ChannelDiff(a) => {
                let mut dx = Tensor::zeros(self.val(*a).shape());
                for (r, &g) in dy.data().iter().enumerate() {
                    dx.row_mut(r)[0] = -g;
                    dx.row_mut(r)[1] = g;
                }
                acc(grads, *a, dx);
            }
            Op::Sum(a) => {
                let g = dy.data()[0];
                acc(grads, *a, self.val(*a).map(|_| g));
            }
            Op::Mean(a) => {
                let av = self.val(*a);
                let g = dy.data()[0] / av.len() as f64;
                acc(grads, *a, av.map(|_| g));
            }
        }
    }
}

fn channel_of(value: f64, channels: usize) -> Option<usize> {
    let c = value as usize;
    (value >= 0.0 && value.fract() == 0.0 && c < channels).then_some(c)
}
