//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every value produced during a forward pass. Operations
//! whose inputs are all untracked are evaluated eagerly and stored as
//! constants, so inference through a frozen model records nothing.

use std::collections::HashMap;

use super::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value stored on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation names, used for error messages and the generic [`Graph::forward_op`] entry point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Tanh,
    Sigmoid,
    Softmax,
    ReluHinge,
    Mean,
    Sum,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    LayerNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f32),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    ReluHinge(Var),
    Softmax(Var),
    Mean(Var),
    Sum(Var),
    MeanRows(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Transpose(Var),
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b, _)
            | Op::Sub(a, b, _)
            | Op::Mul(a, b, _) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::ReluHinge(a)
            | Op::Softmax(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::MeanRows(a)
            | Op::Slice(a, ..)
            | Op::Transpose(a)
            | Op::Reshape(a) => vec![*a],
            Op::Concat(v, _) => v.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

const LN_EPS: f32 = 1e-5;

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

    /// Inserts an input. It is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        self.push_raw(t, Op::Leaf, tracked)
    }

    /// Inserts an untracked input.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push_raw(t, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Accumulated gradient of a leaf across all backward calls since the last [`Graph::zero_grad`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        let op = if tracked { op } else { Op::Constant };
        Ok(self.push_raw(value, op, tracked))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::shape(op, format!("expected a matrix, got {:?}", s))),
        }
    }

    /// Dispatches one of the named operations over `inputs`.
    pub fn forward_op(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize, name: &'static str| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::shape(name, format!("expected {} inputs, got {}", n, inputs.len())));
            }
            Ok(())
        };
        match op {
            OpKind::MatMul => {
                arity(2, "matmul")?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2, "add")?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2, "mul")?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Tanh => {
                arity(1, "tanh")?;
                self.tanh(inputs[0])
            }
            OpKind::Sigmoid => {
                arity(1, "sigmoid")?;
                self.sigmoid(inputs[0])
            }
            OpKind::Softmax => {
                arity(1, "softmax")?;
                self.softmax(inputs[0], None)
            }
            OpKind::ReluHinge => {
                arity(1, "relu_hinge")?;
                self.relu_hinge(inputs[0])
            }
            OpKind::Mean => {
                arity(1, "mean")?;
                self.mean(inputs[0])
            }
            OpKind::Sum => {
                arity(1, "sum")?;
                self.sum(inputs[0])
            }
            OpKind::Concat { axis } => self.concat(inputs, axis),
            OpKind::Slice { axis, start, end } => {
                arity(1, "slice")?;
                self.slice(inputs[0], axis, start, end)
            }
            OpKind::LayerNorm => {
                arity(3, "layer_norm")?;
                self.layer_norm(inputs[0], inputs[1], inputs[2])
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.data(a), self.data(b), &mut out, m, k, n);
        self.push("matmul_nt", Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Bcast::Same);
        }
        let tb = &self.nodes[b.0].value;
        let ta = &self.nodes[a.0].value;
        if tb.numel() == 1 {
            return Ok(Bcast::Scalar);
        }
        if tb.rows() == 1 && tb.cols() == ta.cols() && !sa.is_empty() {
            return Ok(Bcast::Row);
        }
        Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        make: impl FnOnce(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let bc = self.bcast(name, a, b)?;
        let ta = &self.nodes[a.0].value;
        let db = self.data(b);
        let cols = ta.cols();
        let out: Vec<f32> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Bcast::Same => db[i],
                    Bcast::Row => db[i % cols],
                    Bcast::Scalar => db[0],
                };
                f(x, y)
            })
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(name, t, make(a, b, bc))
    }

    /// Elementwise sum; `b` may be a row vector or scalar broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let out: Vec<f32> = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(name, t, op)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f32::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu_hinge(&mut self, a: Var) -> Result<Var> {
        self.unary("relu_hinge", a, |x| x.max(0.0), Op::ReluHinge(a))
    }

    /// Row-wise softmax over the last axis. `mask` (same size as `a`,
    /// `true` = allowed) drops entries, which then receive exactly zero weight.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (rows, cols) = (ta.rows(), ta.cols());
        if let Some(m) = mask {
            if m.len() != ta.numel() {
                return Err(Error::shape(
                    "softmax",
                    format!("mask of {} entries for {:?}", m.len(), ta.shape()),
                ));
            }
        }
        let x = ta.data();
        let mut out = vec![0.0f32; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let allowed = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
            let mut mx = f32::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > mx {
                    mx = v;
                }
            }
            if mx == f32::NEG_INFINITY {
                return Err(Error::shape("softmax", format!("row {} is fully masked", r)));
            }
            let mut z = 0.0f32;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - mx).exp();
                    out[r * cols + j] = e;
                    z += e;
                }
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o /= z;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("softmax", t, Op::Softmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f32 = self.data(a).iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a);
        let s: f32 = d.iter().sum::<f32>() / d.len() as f32;
        self.push("mean", Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean over rows: `r×c → 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut out = vec![0.0f32; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(ta.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / rows as f32;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push("mean_rows", Tensor::matrix(1, cols, out)?, Op::MeanRows(a))
    }

    /// Concatenates matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.dims2("concat", p))
            .collect::<Result<_>>()?;
        let out = match axis {
            0 => {
                let cols = dims[0].1;
                if dims.iter().any(|d| d.1 != cols) {
                    return Err(Error::shape("concat", format!("axis 0 with column counts {:?}", dims)));
                }
                let rows = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for &p in parts {
                    data.extend_from_slice(self.data(p));
                }
                Tensor::matrix(rows, cols, data)?
            }
            1 => {
                let rows = dims[0].0;
                if dims.iter().any(|d| d.0 != rows) {
                    return Err(Error::shape("concat", format!("axis 1 with row counts {:?}", dims)));
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for (&p, d) in parts.iter().zip(&dims) {
                        data.extend_from_slice(&self.data(p)[r * d.1..(r + 1) * d.1]);
                    }
                }
                Tensor::matrix(rows, cols, data)?
            }
            _ => return Err(Error::shape("concat", format!("axis {} unsupported", axis))),
        };
        self.push("concat", out, Op::Concat(parts.to_vec(), axis))
    }

    /// Half-open range `start..end` along axis 0 or 1 of a matrix.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice", a)?;
        let extent = match axis {
            0 => rows,
            1 => cols,
            _ => return Err(Error::shape("slice", format!("axis {} unsupported", axis))),
        };
        if start >= end || end > extent {
            return Err(Error::shape(
                "slice",
                format!("range {}..{} on axis {} of {:?}", start, end, axis, self.shape(a)),
            ));
        }
        let d = self.data(a);
        let t = if axis == 0 {
            Tensor::matrix(end - start, cols, d[start * cols..end * cols].to_vec())?
        } else {
            let w = end - start;
            let mut data = Vec::with_capacity(rows * w);
            for r in 0..rows {
                data.extend_from_slice(&d[r * cols + start..r * cols + end]);
            }
            Tensor::matrix(rows, w, data)?
        };
        self.push("slice", t, Op::Slice(a, axis, start, end))
    }

    /// Per-row normalization over the last axis with affine `gamma`, `beta` (length = cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (rows, cols) = (tx.rows(), tx.cols());
        let (g, b) = (self.data(gamma), self.data(beta));
        if g.len() != cols || b.len() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gamma {}, beta {}", tx.shape(), g.len(), b.len()),
            ));
        }
        let mut xhat = vec![0.0f32; rows * cols];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = tx.row(r);
            let mu = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / cols as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let h = (row[j] - mu) * rs;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("transpose", a)?;
        let d = self.data(a);
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = d[r * cols + c];
            }
        }
        self.push("transpose", Tensor::matrix(cols, rows, out)?, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().with_requires_grad(false);
        let t = Tensor::new(shape.to_vec(), t.into_data())
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {:?}", self.shape(a), shape)))?;
        self.push("reshape", t, Op::Reshape(a))
    }

    /// Reverse pass from a scalar root. Returns this pass's leaf gradients and
    /// also accumulates them into the leaves (see [`Graph::grad`]).
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Backward(format!(
                "root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.nodes[root.0].tracked {
            return Err(Error::Backward("root is detached from every tracked leaf".into()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let op = node.op.clone();
            match op {
                Op::Leaf => {
                    out.map.insert(
                        Var(i),
                        Tensor::new(node.value.shape().to_vec(), gout.clone())?,
                    );
                    self.nodes[i].value.accumulate_grad(&gout)?;
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (m, k) = dims(self.shape(a));
                    let n = self.shape(b)[1];
                    if self.nodes[a.0].tracked {
                        let bd = self.data(b);
                        acc(&mut grads, a, m * k, |ga| matmul_nt_acc(&gout, bd, ga, m, n, k));
                    }
                    if self.nodes[b.0].tracked {
                        let ad = self.data(a);
                        acc(&mut grads, b, k * n, |gb| matmul_tn_acc(ad, &gout, gb, m, k, n));
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (m, k) = dims(self.shape(a));
                    let n = self.shape(b)[0];
                    if self.nodes[a.0].tracked {
                        let bd = self.data(b);
                        acc(&mut grads, a, m * k, |ga| matmul_acc(&gout, bd, ga, m, n, k));
                    }
                    if self.nodes[b.0].tracked {
                        let ad = self.data(a);
                        acc(&mut grads, b, n * k, |gb| matmul_tn_acc(&gout, ad, gb, m, n, k));
                    }
                }
                Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                    let sign = if matches!(self.nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if self.nodes[a.0].tracked {
                        acc(&mut grads, a, gout.len(), |ga| add_into(ga, &gout, 1.0));
                    }
                    if self.nodes[b.0].tracked {
                        let nb = self.nodes[b.0].value.numel();
                        acc(&mut grads, b, nb, |gb| reduce_bcast(gb, &gout, bc, sign, None));
                    }
                }
                Op::Mul(a, b, bc) => {
                    let cols = self.nodes[a.0].value.cols();
                    if self.nodes[a.0].tracked {
                        let bd = self.data(b);
                        acc(&mut grads, a, gout.len(), |ga| {
                            for (idx, g) in ga.iter_mut().enumerate() {
                                let y = match bc {
                                    Bcast::Same => bd[idx],
                                    Bcast::Row => bd[idx % cols],
                                    Bcast::Scalar => bd[0],
                                };
                                *g += gout[idx] * y;
                            }
                        });
                    }
                    if self.nodes[b.0].tracked {
                        let ad = self.data(a);
                        let nb = self.nodes[b.0].value.numel();
                        acc(&mut grads, b, nb, |gb| reduce_bcast(gb, &gout, bc, 1.0, Some(ad)));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, a, gout.len(), |ga| add_into(ga, &gout, c)),
                Op::AddScalar(a) | Op::Reshape(a) => {
                    acc(&mut grads, a, gout.len(), |ga| add_into(ga, &gout, 1.0))
                }
                Op::Tanh(a) => {
                    let y = self.nodes[i].value.data();
                    acc(&mut grads, a, gout.len(), |ga| {
                        for ((g, &go), &yv) in ga.iter_mut().zip(&gout).zip(y) {
                            *g += go * (1.0 - yv * yv);
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[i].value.data();
                    acc(&mut grads, a, gout.len(), |ga| {
                        for ((g, &go), &yv) in ga.iter_mut().zip(&gout).zip(y) {
                            *g += go * yv * (1.0 - yv);
                        }
                    });
                }
                Op::ReluHinge(a) => {
                    let x = self.data(a);
                    acc(&mut grads, a, gout.len(), |ga| {
                        for ((g, &go), &xv) in ga.iter_mut().zip(&gout).zip(x) {
                            if xv > 0.0 {
                                *g += go;
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let yt = &self.nodes[i].value;
                    let (rows, cols) = (yt.rows(), yt.cols());
                    let y = yt.data();
                    acc(&mut grads, a, gout.len(), |ga| {
                        for r in 0..rows {
                            let span = r * cols..(r + 1) * cols;
                            let dotp: f32 = y[span.clone()]
                                .iter()
                                .zip(&gout[span.clone()])
                                .map(|(a, b)| a * b)
                                .sum();
                            for j in span {
                                ga[j] += y[j] * (gout[j] - dotp);
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.numel();
                    acc(&mut grads, a, n, |ga| ga.iter_mut().for_each(|g| *g += gout[0]));
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.numel();
                    let s = gout[0] / n as f32;
                    acc(&mut grads, a, n, |ga| ga.iter_mut().for_each(|g| *g += s));
                }
                Op::MeanRows(a) => {
                    let ta = &self.nodes[a.0].value;
                    let (rows, cols) = (ta.rows(), ta.cols());
                    let inv = 1.0 / rows as f32;
                    acc(&mut grads, a, rows * cols, |ga| {
                        for r in 0..rows {
                            for c in 0..cols {
                                ga[r * cols + c] += gout[c] * inv;
                            }
                        }
                    });
                }
                Op::Concat(parts, axis) => {
                    let total_cols = self.nodes[i].value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let (pr, pc) = dims(self.shape(p));
                        if self.nodes[p.0].tracked {
                            acc(&mut grads, p, pr * pc, |gp| {
                                if axis == 0 {
                                    add_into(gp, &gout[offset * pc..(offset + pr) * pc], 1.0);
                                } else {
                                    for r in 0..pr {
                                        let src = &gout[r * total_cols + offset..r * total_cols + offset + pc];
                                        add_into(&mut gp[r * pc..(r + 1) * pc], src, 1.0);
                                    }
                                }
                            });
                        }
                        offset += if axis == 0 { pr } else { pc };
                    }
                }
                Op::Slice(a, axis, start, end) => {
                    let (rows, cols) = dims(self.shape(a));
                    acc(&mut grads, a, rows * cols, |ga| {
                        if axis == 0 {
                            add_into(&mut ga[start * cols..end * cols], &gout, 1.0);
                        } else {
                            let w = end - start;
                            for r in 0..rows {
                                add_into(
                                    &mut ga[r * cols + start..r * cols + end],
                                    &gout[r * w..(r + 1) * w],
                                    1.0,
                                );
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let cols = self.nodes[i].value.cols();
                    let rows = rstd.len();
                    if self.nodes[gamma.0].tracked {
                        acc(&mut grads, gamma, cols, |gg| {
                            for r in 0..rows {
                                for c in 0..cols {
                                    gg[c] += gout[r * cols + c] * xhat[r * cols + c];
                                }
                            }
                        });
                    }
                    if self.nodes[beta.0].tracked {
                        acc(&mut grads, beta, cols, |gb| {
                            for r in 0..rows {
                                for c in 0..cols {
                                    gb[c] += gout[r * cols + c];
                                }
                            }
                        });
                    }
                    if self.nodes[x.0].tracked {
                        let g = self.data(gamma);
                        acc(&mut grads, x, rows * cols, |gx| {
                            let n = cols as f32;
                            for r in 0..rows {
                                let span = r * cols..(r + 1) * cols;
                                let mut s1 = 0.0f32;
                                let mut s2 = 0.0f32;
                                for c in 0..cols {
                                    let dh = gout[r * cols + c] * g[c];
                                    s1 += dh;
                                    s2 += dh * xhat[r * cols + c];
                                }
                                for j in span {
                                    let c = j - r * cols;
                                    let dh = gout[j] * g[c];
                                    gx[j] += rstd[r] * (dh - s1 / n - xhat[j] * s2 / n);
                                }
                            }
                        });
                    }
                }
                Op::Transpose(a) => {
                    let (rows, cols) = dims(self.shape(a));
                    acc(&mut grads, a, rows * cols, |ga| {
                        for r in 0..rows {
                            for c in 0..cols {
                                ga[r * cols + c] += gout[c * rows + r];
                            }
                        }
                    });
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims(s: &[usize]) -> (usize, usize) {
    (s[0], s[1])
}

fn acc(grads: &mut [Option<Vec<f32>>], v: Var, n: usize, f: impl FnOnce(&mut [f32])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
    f(slot);
}

fn add_into(dst: &mut [f32], src: &[f32], c: f32) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn reduce_bcast(gb: &mut [f32], gout: &[f32], bc: Bcast, sign: f32, other: Option<&[f32]>) {
    let factor = |idx: usize| other.map_or(1.0, |o| o[idx]);
    match bc {
        Bcast::Same => {
            for (idx, g) in gb.iter_mut().enumerate() {
                *g += sign * gout[idx] * factor(idx);
            }
        }
        Bcast::Row => {
            let cols = gb.len();
            for (idx, go) in gout.iter().enumerate() {
                gb[idx % cols] += sign * go * factor(idx);
            }
        }
        Bcast::Scalar => {
            let s: f32 = gout.iter().enumerate().map(|(idx, go)| go * factor(idx)).sum();
            gb[0] += sign * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: &[usize], data: &[f32]) -> Var {
        g.leaf(Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_requires_grad(true))
    }

    #[test]
    fn matmul_by_identity_is_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let i = g.constant(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap());
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn activations_at_zero() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0]));
        let t = g.tanh(z).unwrap();
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(t).data(), &[0.0]);
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn relu_hinge_clips_negatives() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 0.5]));
        let y = g.relu_hinge(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.5]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[], &[3.0]);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn tanh_gradient_matches_central_difference() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[], &[0.5]);
        let y = g.tanh(x).unwrap();
        let got = g.backward(y).unwrap().get(x).unwrap().data()[0] as f64;
        let h = 1e-4f64;
        let fd = ((0.5 + h).tanh() - (0.5 - h).tanh()) / (2.0 * h);
        assert!((got - fd).abs() < 1e-6, "{got} vs {fd}");
        assert!((got - 0.78645).abs() < 1e-5);
    }

    #[test]
    fn hinge_inactive_branch_has_zero_gradient() {
        for x0 in [-1.0f32, 0.0] {
            let mut g = Graph::new();
            let x = leaf(&mut g, &[], &[x0]);
            let y = g.relu_hinge(x).unwrap();
            let grads = g.backward(y).unwrap();
            assert_eq!(grads.get(x).unwrap().data(), &[0.0]);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached_roots() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1.0, 2.0]);
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Backward(_))));

        let c = g.constant(Tensor::scalar(1.0));
        let d = g.tanh(c).unwrap();
        assert!(matches!(g.backward(d), Err(Error::Backward(_))));
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[], &[2.0]);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[8.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![f32::MAX]));
        assert!(matches!(g.scale(a, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn masked_softmax_zeroes_disallowed_entries() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 5.0, 1.0, 5.0]).unwrap());
        let y = g.softmax(a, Some(&[true, false, true, true])).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
        assert!((v[2] + v[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn untracked_ops_record_no_tape() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0]));
        let b = g.tanh(a).unwrap();
        assert!(!g.is_tracked(b));
    }
}
