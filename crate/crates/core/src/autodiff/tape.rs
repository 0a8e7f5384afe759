//! Define-by-run reverse-mode tape.
//!
//! Every primitive appends one node holding its value and enough context to
//! run its vector-Jacobian product. Nodes are appended in evaluation order,
//! so parents always precede children and a single reverse sweep visits
//! each node once.

use std::collections::BTreeMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MaxAxis(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Inverse(Var),
    GatherRows(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add-scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Powf(..) => "powf",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log-softmax",
            Op::LogSumExp(..) => "logsumexp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum-axis",
            Op::MaxAxis(..) => "max-axis",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Inverse(..) => "inverse",
            Op::GatherRows(..) => "gather-rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Axis metadata for axis-wise ops (slice start/len live in the op).
    axis: usize,
}

/// Pending running-statistics update produced by a normalization layer in
/// training mode: `buffer <- momentum * buffer + (1 - momentum) * batch`.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub buffer: ParamId,
    pub batch: Vec<f64>,
    pub momentum: f64,
}

impl StatUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let buf = store.get_mut(self.buffer).data_mut();
        for (r, &b) in buf.iter_mut().zip(&self.batch) {
            *r = self.momentum * *r + (1.0 - self.momentum) * b;
        }
    }
}

/// Gradients collected by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    leaves: BTreeMap<Var, Tensor>,
    pub stat_updates: Vec<StatUpdate>,
}

impl Gradients {
    /// Gradient of a parameter, or `None` if it never entered the tape.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient of a parameter; zeros when it did not influence the loss.
    pub fn param_or_zero(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.params
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    /// Gradient of a leaf created with [`Tape::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

/// Recorder for one forward pass. Consumed by [`Tape::backward`].
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
    leaf_inputs: Vec<Var>,
    training: bool,
    stat_updates: Vec<StatUpdate>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
            leaf_inputs: Vec::new(),
            training: false,
            stat_updates: Vec::new(),
        }
    }

    /// Tape in training mode: normalization layers use batch statistics.
    pub fn training(store: &'s ParamStore) -> Self {
        let mut t = Self::new(store);
        t.training = true;
        t
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn push_stat_update(&mut self, u: StatUpdate) {
        self.stat_updates.push(u);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_axis(value, op, needs_grad, 0)
    }

    fn push_axis(&mut self, value: Tensor, op: Op, needs_grad: bool, axis: usize) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            axis,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Differentiable leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.leaf_inputs.push(v);
        v
    }

    /// Load a parameter from the store. Repeated loads return the same node.
    /// Buffers load as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let trainable = self.store.is_trainable(id);
        let v = self.push(self.store.get(id).clone(), Op::Leaf, trainable);
        self.param_vars.insert(id, v);
        v
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Error if any value of `v` is NaN or infinite.
    pub fn ensure_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!(
                "{context} (node {} from {})",
                v.0,
                self.nodes[v.0].op.name()
            )))
        }
    }

    // ---- elementwise binary ops with broadcasting ----

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ng = self.ng(a) || self.ng(b);
        if sa == sb {
            let da = self.value(a).data();
            let db = self.value(b).data();
            let data = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
            return Ok((Tensor::from_parts(sa.to_vec(), data), ng));
        }
        let out = broadcast_shape(sa, sb).ok_or_else(|| Error::Shape {
            op: op_name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let (ma, mb) = (Bcast::new(&out, sa), Bcast::new(&out, sb));
        let da = self.value(a).data();
        let db = self.value(b).data();
        let total: usize = out.iter().product();
        let data = match (&ma, &mb) {
            (Bcast::Same, Bcast::Row(c)) => da
                .chunks(*c)
                .flat_map(|r| r.iter().zip(db).map(|(&x, &y)| f(x, y)))
                .collect(),
            (Bcast::Same, Bcast::Col(c)) => da
                .chunks(*c)
                .zip(db)
                .flat_map(|(r, &y)| r.iter().map(move |&x| (x, y)))
                .map(|(x, y)| f(x, y))
                .collect(),
            (Bcast::Same, Bcast::Scalar) => da.iter().map(|&x| f(x, db[0])).collect(),
            (Bcast::Scalar, Bcast::Same) => db.iter().map(|&y| f(da[0], y)).collect(),
            _ => (0..total).map(|k| f(da[ma.at(k)], db[mb.at(k)])).collect(),
        };
        Ok((Tensor::from_parts(out, data), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), ng))
    }

    // ---- elementwise unary ops ----

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Powf(a, p), |x| x.powf(p))
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Powf(a, 2.0), |x| x * x)
    }

    // ---- last-dimension reductions ----

    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        let ng = self.ng(a);
        self.push(t, Op::LogSoftmax(a), ng)
    }

    /// Stable log-sum-exp over the last dimension, keeping it with size 1.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let out: Vec<f64> = t.data().chunks(c).map(logsumexp).collect();
        let mut shape = t.shape().to_vec();
        match shape.last_mut() {
            Some(l) => *l = 1,
            None => shape.push(1),
        }
        let t = Tensor::from_parts(shape, out);
        let ng = self.ng(a);
        self.push(t, Op::LogSumExp(a), ng)
    }

    // ---- full and axis reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.numel() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = split_axis(t.shape(), axis, "sum-axis")?;
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &d[(o * len + k) * inner..(o * len + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let ng = self.ng(a);
        Ok(self.push_axis(Tensor::from_parts(shape, out), Op::SumAxis(a, axis), ng, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| axis_error("mean-axis", self.shape(a)))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Max over `axis`, keeping it with size 1. Ties go to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = split_axis(t.shape(), axis, "max-axis")?;
        let d = t.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let slot = o * inner + i;
                for k in 0..len {
                    let idx = (o * len + k) * inner + i;
                    if d[idx] > out[slot] || k == 0 {
                        out[slot] = d[idx];
                        arg[slot] = idx;
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let ng = self.ng(a);
        Ok(self.push_axis(Tensor::from_parts(shape, out), Op::MaxAxis(a, arg), ng, axis))
    }

    // ---- structural ops ----

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(axis_error("concat", &base));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push_axis(
            Tensor::from_parts(shape, out),
            Op::Concat(parts.to_vec(), axis),
            ng,
            axis,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = split_axis(t.shape(), axis, "slice")?;
        if start >= end || end > len {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{end} out of range for axis {axis} of {:?}",
                t.shape()
            )));
        }
        let w = end - start;
        let d = t.data();
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = w;
        let ng = self.ng(a);
        Ok(self.push_axis(Tensor::from_parts(shape, out), Op::Slice(a, start, end), ng, axis))
    }

    /// Column `c` of a 2-D tensor as `[rows, 1]`.
    pub fn column(&mut self, a: Var, c: usize) -> Result<Var> {
        let axis = self.shape(a).len().saturating_sub(1);
        self.slice(a, axis, c, c + 1)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), ng))
    }

    /// Rows of a 2-D tensor selected (with repetition) by `idx`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::Shape {
                op: "gather-rows",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        if idx.is_empty() {
            return Err(Error::Empty("gather-rows index"));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::InvalidArgument(format!(
                    "gather-rows index {i} out of range for {r} rows"
                )));
            }
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::GatherRows(a, idx.to_vec()),
            ng,
        ))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    /// Inverse of a square matrix.
    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let inv = invert(self.value(a))?;
        let ng = self.ng(a);
        Ok(self.push(inv, Op::Inverse(a), ng))
    }

    // ---- reverse sweep ----

    /// Propagate gradients of the scalar `loss` to every parameter and input
    /// leaf. Consumes the tape.
    pub fn backward(mut self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.vjp(i, &g, &mut grads)?;
        }

        let mut out = Gradients {
            stat_updates: std::mem::take(&mut self.stat_updates),
            ..Default::default()
        };
        for (&pid, &v) in &self.param_vars {
            if let Some(Some(g)) = grads.get_mut(v.0).map(Option::take) {
                let shape = self.nodes[v.0].value.shape().to_vec();
                out.params.insert(pid, Tensor::from_parts(shape, g));
            }
        }
        for &v in &self.leaf_inputs {
            let shape = self.nodes[v.0].value.shape().to_vec();
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
            out.leaves.insert(v, Tensor::from_parts(shape, g));
        }
        Ok(out)
    }

    fn vjp(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_bcast(*a, out_shape, g, grads, |gv, _| gv);
                self.acc_bcast(*b, out_shape, g, grads, |gv, _| gv);
            }
            Op::Sub(a, b) => {
                self.acc_bcast(*a, out_shape, g, grads, |gv, _| gv);
                self.acc_bcast(*b, out_shape, g, grads, |gv, _| -gv);
            }
            Op::Mul(a, b) => {
                let bv = self.bcast_values(*b, out_shape);
                let av = self.bcast_values(*a, out_shape);
                self.acc_bcast(*a, out_shape, g, grads, |gv, k| gv * bv[k]);
                self.acc_bcast(*b, out_shape, g, grads, |gv, k| gv * av[k]);
            }
            Op::Div(a, b) => {
                let bv = self.bcast_values(*b, out_shape);
                self.acc_bcast(*a, out_shape, g, grads, |gv, k| gv / bv[k]);
                self.acc_bcast(*b, out_shape, g, grads, |gv, k| -gv * y[k] / bv[k]);
            }
            Op::Scale(a, c) => self.acc(*a, grads, |d| {
                d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * c)
            }),
            Op::AddScalar(a) => self.acc(*a, grads, |d| {
                d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv)
            }),
            Op::Sigmoid(a) => self.acc(*a, grads, |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Op::Tanh(a) => self.acc(*a, grads, |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.acc(*a, grads, |d| {
                    for k in 0..d.len() {
                        if x[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                })
            }
            Op::Exp(a) => self.acc(*a, grads, |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * y[k];
                }
            }),
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.acc(*a, grads, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / x[k];
                    }
                })
            }
            Op::Powf(a, p) => {
                let x = self.value(*a).data();
                let p = *p;
                self.acc(*a, grads, |d| {
                    for k in 0..d.len() {
                        let dx = if p == 2.0 { 2.0 * x[k] } else { p * x[k].powf(p - 1.0) };
                        d[k] += g[k] * dx;
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                self.acc(*a, grads, |d| {
                    for k in 0..d.len() {
                        if x[k] > *lo && x[k] < *hi {
                            d[k] += g[k];
                        }
                    }
                })
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                self.acc(*a, grads, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for k in 0..c {
                            drow[k] += yrow[k] * (grow[k] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                self.acc(*a, grads, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let gs: f64 = grow.iter().sum();
                        for k in 0..c {
                            drow[k] += grow[k] - yrow[k].exp() * gs;
                        }
                    }
                })
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let xd = x.data();
                self.acc(*a, grads, |d| {
                    for (r, drow) in d.chunks_mut(c).enumerate() {
                        for k in 0..c {
                            drow[k] += g[r] * (xd[r * c + k] - y[r]).exp();
                        }
                    }
                })
            }
            Op::Sum(a) => self.acc(*a, grads, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let s = g[0] / self.value(*a).numel() as f64;
                self.acc(*a, grads, |d| d.iter_mut().for_each(|v| *v += s))
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis, "sum-axis")?;
                self.acc(*a, grads, |d| {
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                d[(o * len + k) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                })
            }
            Op::MaxAxis(a, arg) => self.acc(*a, grads, |d| {
                for (slot, &idx) in arg.iter().enumerate() {
                    d[idx] += g[slot];
                }
            }),
            Op::Concat(parts, axis) => {
                let axis = *axis;
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[axis];
                    self.acc(p, grads, |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut d[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice(a, start, end) => {
                let axis = node.axis;
                let (outer, len, inner) = split_axis(self.shape(*a), axis, "slice")?;
                let w = end - start;
                self.acc(*a, grads, |d| {
                    for o in 0..outer {
                        let dst = &mut d[(o * len + start) * inner..(o * len + end) * inner];
                        let src = &g[o * w * inner..(o + 1) * w * inner];
                        dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = G B^T, dB = A^T G
                self.acc(*a, grads, |d| gemm(m, n, k, g, false, bv, true, d, true));
                self.acc(*b, grads, |d| gemm(k, m, n, av, true, g, false, d, true));
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.acc(*a, grads, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                })
            }
            Op::Reshape(a) => self.acc(*a, grads, |d| {
                d.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
            }),
            Op::Inverse(a) => {
                // d(A^-1) = -A^-T G A^-T
                let n = out_shape[0];
                let mut tmp = vec![0.0; n * n];
                gemm(n, n, n, y, true, g, false, &mut tmp, false);
                let mut res = vec![0.0; n * n];
                gemm(n, n, n, &tmp, false, y, true, &mut res, false);
                self.acc(*a, grads, |d| {
                    d.iter_mut().zip(&res).for_each(|(x, &v)| *x -= v)
                })
            }
            Op::GatherRows(a, idx) => {
                let c = self.shape(*a)[1];
                self.acc(*a, grads, |d| {
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut d[src * c..(src + 1) * c];
                        dst.iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                            .for_each(|(x, &y)| *x += y);
                    }
                })
            }
        }
        Ok(())
    }

    fn acc(&self, v: Var, grads: &mut [Option<Vec<f64>>], f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    /// Accumulate `h(g[k], k)` into the (possibly broadcast) input `v`.
    fn acc_bcast(
        &self,
        v: Var,
        out_shape: &[usize],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        h: impl Fn(f64, usize) -> f64,
    ) {
        let in_shape = self.shape(v);
        if in_shape == out_shape {
            self.acc(v, grads, |d| {
                for k in 0..d.len() {
                    d[k] += h(g[k], k);
                }
            });
        } else {
            let map = Bcast::new(out_shape, in_shape);
            self.acc(v, grads, |d| match map {
                Bcast::Row(c) => {
                    for (r, gr) in g.chunks(c).enumerate() {
                        for (j, &gv) in gr.iter().enumerate() {
                            d[j] += h(gv, r * c + j);
                        }
                    }
                }
                Bcast::Col(c) => {
                    for (r, gr) in g.chunks(c).enumerate() {
                        let mut acc = 0.0;
                        for (j, &gv) in gr.iter().enumerate() {
                            acc += h(gv, r * c + j);
                        }
                        d[r] += acc;
                    }
                }
                _ => {
                    for (k, &gv) in g.iter().enumerate() {
                        d[map.at(k)] += h(gv, k);
                    }
                }
            });
        }
    }

    /// Values of `v` broadcast to `out_shape` (borrowed when no broadcast).
    fn bcast_values(&self, v: Var, out_shape: &[usize]) -> std::borrow::Cow<'_, [f64]> {
        let t = self.value(v);
        if t.shape() == out_shape {
            std::borrow::Cow::Borrowed(t.data())
        } else {
            let map = Bcast::new(out_shape, t.shape());
            let total: usize = out_shape.iter().product();
            std::borrow::Cow::Owned((0..total).map(|k| t.data()[map.at(k)]).collect())
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable `ln Σ exp(x_i)`.
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn axis_error(op: &'static str, shape: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: shape.to_vec(),
        rhs: vec![],
    }
}

fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(axis_error(op, shape));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return None;
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index of the broadcast source.
/// Source index of each output element under broadcasting, with direct
/// arithmetic for the row, column and scalar cases.
enum Bcast {
    Same,
    Scalar,
    /// `[c]` or `[1, c]` against `[r, c]`.
    Row(usize),
    /// `[r, 1]` against `[r, c]`.
    Col(usize),
    Map(Vec<usize>),
}

impl Bcast {
    fn new(out: &[usize], inp: &[usize]) -> Self {
        if out == inp {
            Bcast::Same
        } else if inp.iter().product::<usize>() == 1 {
            Bcast::Scalar
        } else if out.len() == 2 && (inp == [out[1]] || inp == [1, out[1]]) {
            Bcast::Row(out[1])
        } else if out.len() == 2 && inp == [out[0], 1] {
            Bcast::Col(out[1])
        } else {
            Bcast::Map(index_map(out, inp))
        }
    }

    #[inline(always)]
    fn at(&self, k: usize) -> usize {
        match self {
            Bcast::Same => k,
            Bcast::Scalar => 0,
            Bcast::Row(c) => k % c,
            Bcast::Col(c) => k / c,
            Bcast::Map(m) => m[k],
        }
    }
}

fn index_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let pad = nd - inp.len();
    let mut strides = vec![0usize; nd];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        strides[i + pad] = if inp[i] == 1 { 0 } else { s };
        s *= inp[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    if nd == 0 {
        map.push(0);
        return map;
    }
    if total == 0 {
        return map;
    }
    // Odometer over the leading axes; the last axis is a tight loop.
    let (inner, step) = (out[nd - 1], strides[nd - 1]);
    let outer = total / inner;
    let mut idx = vec![0usize; nd - 1];
    let mut pos = 0usize;
    for _ in 0..outer {
        map.extend((0..inner).map(|j| pos + j * step));
        let mut d = nd - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            pos += strides[d];
            if idx[d] < out[d] {
                break;
            }
            pos -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

/// `c (+)= op(a) · op(b)` for row-major buffers, where `op` optionally
/// transposes. Logical shapes: `op(a)` is `[m, k]`, `op(b)` is `[k, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: buffer lengths checked above; strides describe in-bounds
    // row- or column-major layouts of exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(a: &Tensor) -> Result<Tensor> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Shape {
            op: "inverse",
            lhs: s.to_vec(),
            rhs: vec![],
        });
    }
    let n = s[0];
    let mut m = a.data().to_vec();
    let mut inv = Tensor::eye(n).into_data();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap_or(col);
        if m[piv * n + col].abs() < 1e-300 {
            return Err(Error::InvalidArgument("singular matrix".into()));
        }
        if piv != col {
            for j in 0..n {
                m.swap(col * n + j, piv * n + j);
                inv.swap(col * n + j, piv * n + j);
            }
        }
        let p = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= p;
            inv[col * n + j] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = m[i * n + col];
                if f != 0.0 {
                    for j in 0..n {
                        m[i * n + j] -= f * m[col * n + j];
                        inv[i * n + j] -= f * inv[col * n + j];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, n], inv))
}
