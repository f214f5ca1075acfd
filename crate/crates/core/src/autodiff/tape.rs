//! Reverse-mode tape.
//!
//! Every op evaluates eagerly, records its inputs, and rejects non-finite
//! results. `backward` replays the record in exact reverse order.

use std::collections::HashMap;

use rand::Rng;

use super::tensor::{ParamId, ParameterSet, Tensor};
use crate::error::{shape_err, Error, Result};

/// Probability clamp applied inside [`Tape::bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
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

/// Deliberately wrong adjoints, used to prove the gradient checker catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fault {
    TanhAdjoint,
    SigmoidAdjoint,
    MatmulAdjoint,
    SoftmaxAdjoint,
}

impl Fault {
    pub fn op_name(self) -> &'static str {
        match self {
            Fault::TanhAdjoint => "tanh",
            Fault::SigmoidAdjoint => "sigmoid",
            Fault::MatmulAdjoint => "matmul",
            Fault::SoftmaxAdjoint => "softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Fault::TanhAdjoint),
            "sigmoid" => Some(Fault::SigmoidAdjoint),
            "matmul" => Some(Fault::MatmulAdjoint),
            "softmax" => Some(Fault::SoftmaxAdjoint),
            _ => None,
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Act(Var, Activation),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize, len: usize },
    SoftmaxCols(Var),
    SumRows(Var),
    Sum(Var),
    Bce { p: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    params: HashMap<ParamId, Var>,
    fault: Option<Fault>,
}

/// Split `shape` around `axis` into (outer, axis_len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self {
            fault,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop the record and all accumulated gradients. Parameter values live in
    /// the [`ParameterSet`] and are untouched.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.leaf_grads.clear();
        self.params.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            other => self.inputs_of(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MulConst(x, _)
            | Op::Scale(x, _)
            | Op::Act(x, _)
            | Op::Reshape(x)
            | Op::SoftmaxCols(x)
            | Op::SumRows(x)
            | Op::Sum(x) => vec![*x],
            Op::Narrow { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Bce { p, .. } => vec![*p],
        }
    }

    /// Record a tensor; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        self.push(tensor, Op::Leaf, "leaf")
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.push(tensor.with_requires_grad(false), Op::Leaf, "leaf")
    }

    /// Bring a parameter onto the tape. Repeated calls return the same var.
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Result<Var> {
        if let Some(v) = self.params.get(&id) {
            return Ok(*v);
        }
        let t = params.get(id);
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())?.with_requires_grad(true);
        let v = self.leaf(value)?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated adjoint of a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    /// Add every parameter leaf's accumulated adjoint into `params`.
    pub fn accumulate_param_grads(&self, params: &mut ParameterSet) -> Result<()> {
        let mut ids: Vec<_> = self.params.iter().collect();
        ids.sort_by_key(|(id, _)| **id);
        for (id, v) in ids {
            if let Some(g) = self.leaf_grads.get(&v.0) {
                params.accumulate_grad(*id, g)?;
            }
        }
        Ok(())
    }

    /// Parameter adjoints as `(id, gradient)` in ascending id order.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(id, v)| self.leaf_grads.get(&v.0).map(|g| (*id, g.as_slice())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}×{k}] · [{k2}×{n}]")));
        }
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::Add(a, b), "add")
    }

    /// `x[m×n] + bias[1×n]`, the bias repeated on every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).numel() != n {
            return Err(shape_err("add_row", format!("bias {:?} for [{m}×{n}]", self.shape(bias))));
        }
        let b = self.data(bias);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::AddRow(x, bias), "add_row")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    /// Elementwise product with a non-differentiable mask.
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(shape_err("mul_const", "mask length differs from input"));
        }
        let data = self.data(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::MulConst(x, mask), "mul_const")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * factor).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::Scale(x, factor), "scale")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        if !self.value(x).is_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let data = self.data(x).iter().map(|&v| kind.eval(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::Act(x, kind), kind.name())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| shape_err("concat", "empty input list"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let agree = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !agree {
                return Err(shape_err("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.data(x)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        self.push(
            t,
            Op::Concat {
                inputs: xs.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        self.push(t, Op::Narrow { x, axis, start, len }, "narrow")
    }

    /// Row `i` of a matrix as a `1 × n` var.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.narrow(x, 0, i, 1)
    }

    /// Softmax down each column: every column of the output sums to one.
    /// The per-column maximum is subtracted before exponentiation.
    pub fn softmax_cols(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.data(x);
        let mut out = vec![0.0; m * n];
        for j in 0..n {
            let max = (0..m).map(|i| src[i * n + j]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for i in 0..m {
                let e = (src[i * n + j] - max).exp();
                out[i * n + j] = e;
                denom += e;
            }
            for i in 0..m {
                out[i * n + j] /= denom;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(t, Op::SoftmaxCols(x), "softmax")
    }

    /// Column sums: `[m×n] → [1×n]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        let mut out = vec![0.0; n];
        for row in self.data(x).chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        self.push(Tensor::row(out)?, Op::SumRows(x), "sum_rows")
    }

    /// Column means: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x).rows();
        let s = self.sum_rows(x)?;
        self.scale(s, 1.0 / m as f64)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Mean binary cross-entropy of probabilities `p` against `labels`,
    /// with `p` clamped to `[BCE_EPS, 1 − BCE_EPS]`.
    pub fn bce_loss(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let probs = self.data(p);
        if probs.len() != labels.len() {
            return Err(shape_err(
                "bce",
                format!("{} probabilities vs {} labels", probs.len(), labels.len()),
            ));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidArgument("bce labels must be 0 or 1".into()));
        }
        let n = labels.len() as f64;
        let loss = probs
            .iter()
            .zip(labels)
            .map(|(&p, &y)| bce(p, y))
            .sum::<f64>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            "bce",
        )
    }

    /// Inverted dropout. Exact identity when `!training` or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    // ------------------------------------------------------------ backward

    /// Propagate adjoints from a scalar `loss`. Leaf adjoints accumulate
    /// across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let entry = self.leaf_grads.entry(idx).or_insert_with(|| vec![0.0; g.len()]);
                    entry.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                op => self.propagate(op, &node.value, &g, &mut adj),
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2().unwrap();
                let (_, n) = bv.dims2().unwrap();
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    if self.fault == Some(Fault::MatmulAdjoint) {
                        da.iter_mut().for_each(|v| *v *= 1.5);
                    }
                    add_into(&mut adj[a.0], &da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aval = av.data()[i * k + p];
                            if aval == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            drow.iter_mut().zip(grow).for_each(|(d, gv)| *d += aval * gv);
                        }
                    }
                    add_into(&mut adj[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut adj[a.0], g);
                }
                if self.wants(*b) {
                    add_into(&mut adj[b.0], g);
                }
            }
            Op::AddRow(x, bias) => {
                if self.wants(*x) {
                    add_into(&mut adj[x.0], g);
                }
                if self.wants(*bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    add_into(&mut adj[bias.0], &db);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let da: Vec<f64> = g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect();
                    add_into(&mut adj[a.0], &da);
                }
                if self.wants(*b) {
                    let db: Vec<f64> = g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect();
                    add_into(&mut adj[b.0], &db);
                }
            }
            Op::MulConst(x, mask) => {
                let dx: Vec<f64> = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                add_into(&mut adj[x.0], &dx);
            }
            Op::Scale(x, f) => {
                let dx: Vec<f64> = g.iter().map(|v| v * f).collect();
                add_into(&mut adj[x.0], &dx);
            }
            Op::Act(x, kind) => {
                let y = out.data();
                let input = self.data(*x);
                let dx: Vec<f64> = match kind {
                    Activation::Relu => g
                        .iter()
                        .zip(input)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                    Activation::Tanh if self.fault == Some(Fault::TanhAdjoint) => {
                        g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv)).collect()
                    }
                    Activation::Tanh => g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect(),
                    Activation::Sigmoid if self.fault == Some(Fault::SigmoidAdjoint) => {
                        g.iter().zip(y).map(|(gv, yv)| gv * yv).collect()
                    }
                    Activation::Sigmoid => g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect(),
                };
                add_into(&mut adj[x.0], &dx);
            }
            Op::Reshape(x) => add_into(&mut adj[x.0], g),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for x in inputs {
                    let len = self.shape(*x)[*axis];
                    if self.wants(*x) {
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            dx.extend_from_slice(&g[base..base + len * inner]);
                        }
                        add_into(&mut adj[x.0], &dx);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start, len } => {
                let shape = self.shape(*x);
                let (outer, alen, inner) = split_axis(shape, *axis);
                let mut dx = vec![0.0; outer * alen * inner];
                for o in 0..outer {
                    let base = o * alen * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dx[base..base + len * inner].copy_from_slice(src);
                }
                add_into(&mut adj[x.0], &dx);
            }
            Op::SoftmaxCols(x) => {
                let (m, n) = out.dims2().unwrap();
                let y = out.data();
                let mut dx = vec![0.0; m * n];
                for j in 0..n {
                    let dot: f64 = (0..m).map(|i| y[i * n + j] * g[i * n + j]).sum();
                    for i in 0..m {
                        dx[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
                    }
                }
                if self.fault == Some(Fault::SoftmaxAdjoint) {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += 0.1 * gv;
                    }
                }
                add_into(&mut adj[x.0], &dx);
            }
            Op::SumRows(x) => {
                let m = self.value(*x).rows();
                let dx: Vec<f64> = (0..m).flat_map(|_| g.iter().copied()).collect();
                add_into(&mut adj[x.0], &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.value(*x).numel()];
                add_into(&mut adj[x.0], &dx);
            }
            Op::Bce { p, labels } => {
                let n = labels.len() as f64;
                let dx: Vec<f64> = self
                    .data(*p)
                    .iter()
                    .zip(labels)
                    .map(|(&pv, &y)| g[0] * bce_grad(pv, y) / n)
                    .collect();
                add_into(&mut adj[p.0], &dx);
            }
        }
    }
}

/// Binary cross-entropy of one clamped probability.
pub fn bce(p: f64, y: f64) -> f64 {
    let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
}

fn bce_grad(p: f64, y: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        return 0.0;
    }
    -y / p + (1.0 - y) / (1.0 - p)
}

/// Per-coordinate softmax across a group of equally sized row vectors.
pub fn group_softmax(tape: &mut Tape, vectors: &[Var]) -> Result<Vec<Var>> {
    if vectors.is_empty() {
        return Err(shape_err("group_softmax", "empty group"));
    }
    let d = tape.value(vectors[0]).numel();
    let mut rows = Vec::with_capacity(vectors.len());
    for &v in vectors {
        if tape.value(v).numel() != d {
            return Err(shape_err("group_softmax", "vectors differ in dimension"));
        }
        rows.push(tape.reshape(v, vec![1, d])?);
    }
    let stacked = tape.concat(&rows, 0)?;
    let weights = tape.softmax_cols(stacked)?;
    (0..vectors.len()).map(|i| tape.row(weights, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf(t: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        t.leaf(Tensor::new(shape, data).unwrap().with_requires_grad(true)).unwrap()
    }

    /// sinh/cosh by 30-term Taylor series.
    fn tanh_series(x: f64) -> f64 {
        let (mut sinh, mut cosh) = (0.0, 0.0);
        let mut term = 1.0; // x^k / k!
        for k in 0..60 {
            if k % 2 == 0 {
                cosh += term;
            } else {
                sinh += term;
            }
            term *= x / (k + 1) as f64;
        }
        sinh / cosh
    }

    #[test]
    fn activation_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![0.0, -2.0, 3.0, 0.7]).unwrap()).unwrap();
        let s = t.sigmoid(x).unwrap();
        let r = t.relu(x).unwrap();
        let th = t.tanh(x).unwrap();
        assert_eq!(t.data(s)[0], 0.5);
        assert_eq!(t.data(r)[1], 0.0);
        assert_eq!(t.data(r)[2], 3.0);
        assert!((t.data(th)[3] - tanh_series(0.7)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.0]).unwrap());
        assert!(x.is_ok());
        let bad = t.leaf(Tensor::row(vec![f64::NAN]).unwrap());
        assert!(matches!(bad, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut t = Tape::new();
        let i3 = t.constant(Tensor::identity(3)).unwrap();
        let m = t.constant(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
        let p = t.matmul(i3, m).unwrap();
        assert_eq!(t.data(p), t.data(m));
        let a = t.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap()).unwrap();
        let b = t.constant(Tensor::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[6.0]);
        assert!(t.matmul(m, m).is_err());
    }

    #[test]
    fn concat_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![128])).unwrap();
        let b = t.constant(Tensor::zeros(vec![128])).unwrap();
        let single = t.concat(&[a], 0).unwrap();
        assert_eq!(t.shape(single), &[128]);
        let ab = t.concat(&[a, b], 0).unwrap();
        assert_eq!(t.shape(ab), &[256]);
        let abc = t.concat(&[a, b, a], 0).unwrap();
        assert_eq!(t.shape(abc), &[384]);
        assert!(t.concat(&[], 0).is_err());
        let r = t.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let q = t.constant(Tensor::zeros(vec![3, 3])).unwrap();
        assert!(t.concat(&[r, q], 1).is_err());
        let rq = t.concat(&[r, q], 0).unwrap();
        assert_eq!(t.shape(rq), &[5, 3]);
    }

    #[test]
    fn concat_backward_splits_adjoint() {
        let mut t = Tape::new();
        let a = leaf(&mut t, vec![2, 1], vec![1.0, 2.0]);
        let b = leaf(&mut t, vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.data(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = t.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
        let p = t.mul(c, w).unwrap();
        let s = t.sum(p).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0, 4.0]);
        assert_eq!(t.grad(b).unwrap(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn group_softmax_examples() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::row(vec![3.0, -1.0]).unwrap()).unwrap();
        let w = group_softmax(&mut t, &[v]).unwrap();
        assert_eq!(t.data(w[0]), &[1.0, 1.0]);

        let w = group_softmax(&mut t, &[v, v]).unwrap();
        assert_eq!(t.data(w[0]), &[0.5, 0.5]);

        let vs: Vec<Var> = [0.0, 2f64.ln(), 4f64.ln()]
            .iter()
            .map(|&x| t.constant(Tensor::row(vec![x]).unwrap()).unwrap())
            .collect();
        let w = group_softmax(&mut t, &vs).unwrap();
        for (wi, expect) in w.iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
            assert!((t.data(*wi)[0] - expect).abs() < 1e-15);
        }
        assert!(group_softmax(&mut t, &[]).is_err());
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(2, 1, vec![1000.0, 999.0]).unwrap()).unwrap();
        let y = t.softmax_cols(x).unwrap();
        let e = 1.0f64.exp();
        assert!((t.data(y)[0] - e / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![1.0; 10]).unwrap()).unwrap();
        assert_eq!(t.dropout(x, 0.4, false, &mut rng).unwrap(), x);
        assert_eq!(t.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert!(t.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::new();
        let input: Vec<f64> = (0..10_000).map(|i| 0.5 + (i % 7) as f64 * 0.1).collect();
        let mean_in = input.iter().sum::<f64>() / input.len() as f64;
        let x = t.constant(Tensor::row(input).unwrap()).unwrap();
        let y = t.dropout(x, 0.4, true, &mut rng).unwrap();
        let out = t.data(y);
        let kept = out.iter().filter(|&&v| v != 0.0).count() as f64 / out.len() as f64;
        assert!((kept - 0.6).abs() <= 0.02, "kept fraction {kept}");
        let mean_out = out.iter().sum::<f64>() / out.len() as f64;
        assert!(((mean_out - mean_in) / mean_in).abs() < 0.02);
    }

    #[test]
    fn bce_values() {
        assert!((bce(0.5, 1.0) - 2f64.ln()).abs() < 1e-12);
        assert!(bce(1.0 - BCE_EPS, 1.0) < 1.1e-7);
        assert!((bce(0.9, 0.0) - 10f64.ln()).abs() < 1e-12);
        assert!(bce(0.0, 1.0).is_finite());
    }

    #[test]
    fn backward_sum_and_sigmoid() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![3], vec![1.0, -2.0, 5.0]);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let w = leaf(&mut t, vec![1], vec![0.0]);
        let sg = t.sigmoid(w).unwrap();
        let l = t.scale(sg, 3.0).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[0.75]);
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![2], vec![1.0, 2.0]);
        assert!(t.backward(x).is_err());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn fan_out_sums_contributions() {
        // f = sum(x ⊙ x) + sum(3x): df/dx = 2x + 3
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![2], vec![1.5, -0.5]);
        let sq = t.mul(x, x).unwrap();
        let tr = t.scale(x, 3.0).unwrap();
        let both = t.add(sq, tr).unwrap();
        let s = t.sum(both).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0, 2.0]);
    }

    #[test]
    fn clear_keeps_parameters() {
        let mut ps = ParameterSet::new();
        let id = ps.insert("w", Tensor::row(vec![1.0, 2.0]).unwrap()).unwrap();
        let mut t = Tape::new();
        let w = t.param(&ps, id).unwrap();
        assert_eq!(t.param(&ps, id).unwrap(), w);
        let s = t.sum(w).unwrap();
        t.backward(s).unwrap();
        t.accumulate_param_grads(&mut ps).unwrap();
        t.clear();
        assert!(t.is_empty());
        assert_eq!(ps.get(id).data(), &[1.0, 2.0]);
        assert_eq!(ps.get(id).grad().unwrap(), &[1.0, 1.0]);
    }
}
