//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! context to run its backward rule. [`Tape::backward`] walks the nodes once in
//! reverse recording order. A tape is built fresh for every training step and
//! may be backpropagated exactly once; a second call is rejected.
//!
//! Parameters enter the tape through [`Tape::param`] (a copy of the stored
//! value) or [`Tape::gather`] (selected rows of an embedding table). After
//! `backward`, [`Tape::accumulate_param_grads`] adds their gradients into the
//! [`ParamStore`], skipping frozen rows.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, rows_cols, Tensor};

/// Lower and upper clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Gather {
        table: ParamId,
        rows: Vec<usize>,
    },
    MatMul(Var, Var),
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale(Var, f64),
    Unary(UnaryKind, Var),
    Sum(Var),
    Mean(Var),
    ReduceAxis {
        input: Var,
        axis: usize,
        mean: bool,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    Reshape(Var),
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        targets: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    MaskMul(Var, Vec<f64>),
    PopVariance(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
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
        debug_assert!(self.grads.is_none(), "recording on a tape after backward");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter onto the tape (once per tape; repeated calls
    /// return the same node).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// Looks up rows of a `[V x d]` table parameter, giving `[rows.len() x d]`.
    pub fn gather(&mut self, store: &ParamStore, table: ParamId, rows: &[usize]) -> Result<Var> {
        let t = store.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("gather", t.shape(), &[]));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= vocab {
                return Err(Error::contract(format!("gather row {r} out of range for table of {vocab} rows")));
            }
            data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            true,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast = if sa == sb {
            false
        } else {
            let (_, cols) = rows_cols(sa);
            let b_is_row = match sb {
                [n] => *n == cols,
                [1, n] => *n == cols,
                _ => false,
            };
            if !b_is_row || sa.is_empty() {
                return Err(Error::shape("elementwise", sa, sb));
            }
            true
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = match kind {
            BinKind::Add => |x: f64, y: f64| x + y,
            BinKind::Sub => |x: f64, y: f64| x - y,
            BinKind::Mul => |x: f64, y: f64| x * y,
        };
        let out: Vec<f64> = if broadcast {
            let cols = bv.len();
            av.iter().enumerate().map(|(i, &x)| f(x, bv[i % cols])).collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            },
            rg,
        ))
    }

    /// `a + b`; `b` may also be a row vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().map(|x| x * factor).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f = match kind {
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Relu => |x: f64| if x > 0.0 { x } else { 0.0 },
        };
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().map(|&x| f(x)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    /// Dispatches one of the elementwise primitives; binary ops need `b`.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::contract(format!("{op:?} needs a second operand")));
        match op {
            ElementwiseOp::Add => self.add(a, need_b()?),
            ElementwiseOp::Sub => self.sub(a, need_b()?),
            ElementwiseOp::Mul => self.mul(a, need_b()?),
            ElementwiseOp::Sigmoid => Ok(self.sigmoid(a)),
            ElementwiseOp::Tanh => Ok(self.tanh(a)),
            ElementwiseOp::Relu => Ok(self.relu(a)),
        }
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "reduce axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                add_into(&mut out[o * inner..(o + 1) * inner], &data[base..base + inner]);
            }
        }
        if mean && len > 0 {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::ReduceAxis { input: a, axis, mean },
            rg,
        ))
    }

    /// Sum or mean, over everything (`axis == None`) or along one axis.
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var> {
        match (op, axis) {
            (ReduceOp::Sum, None) => Ok(self.sum(a)),
            (ReduceOp::Mean, None) => Ok(self.mean(a)),
            (ReduceOp::Sum, Some(ax)) => self.reduce_axis(a, ax, false),
            (ReduceOp::Mean, Some(ax)) => self.reduce_axis(a, ax, true),
        }
    }

    /// Concatenates along `axis`. Inputs with no elements are skipped.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<Var> = inputs.iter().copied().filter(|&v| !self.value(v).is_empty()).collect();
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat of no non-empty tensors"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::contract(format!("concat axis {axis} out of range for rank {}", base.len())));
        }
        let mut total = 0;
        for &p in &parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in &parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { inputs: parts, axis }, rg))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start > end || end > s[0] {
            return Err(Error::shape("slice_rows", s, &[start, end]));
        }
        let cols = s[1];
        let data = self.value(a).data()[start * cols..end * cols].to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![end - start, cols], data)?,
            Op::SliceRows { input: a, start },
            rg,
        ))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start > end || end > s[1] {
            return Err(Error::shape("slice_cols", s, &[start, end]));
        }
        let (rows, cols) = (s[0], s[1]);
        let width = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![rows, width], data)?,
            Op::SliceCols { input: a, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Softmax over the last axis, computed with the max-shift.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::contract("softmax of an empty tensor"));
        }
        if !t.all_finite() {
            return Err(Error::contract("softmax input is not finite"));
        }
        let (rows, cols) = t.rows_cols();
        let mut out = t.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a), rg))
    }

    /// Mean cross-entropy `-(1/n) sum_i sum_j t_ij ln p_ij` between rows of
    /// probabilities and rows of (one-hot or soft) targets of the same shape.
    /// Probabilities are clamped to `[1e-12, 1 - 1e-12]` before the log.
    pub fn cross_entropy(&mut self, probs: Var, targets: &Tensor) -> Result<Var> {
        let p = self.value(probs);
        if p.shape() != targets.shape() {
            return Err(Error::shape("cross_entropy", p.shape(), targets.shape()));
        }
        let (rows, _) = p.rows_cols();
        if rows == 0 {
            return Err(Error::contract("cross_entropy over zero rows"));
        }
        let mut loss = 0.0;
        for (&pv, &tv) in p.data().iter().zip(targets.data()) {
            if tv != 0.0 {
                loss -= tv * pv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln();
            }
        }
        loss /= rows as f64;
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    /// Same-padded 1-D cross-correlation along the length axis.
    ///
    /// `x` is `[..., len, in]`, `w` is `[out, in, k]` with odd `k`, `b` is
    /// `[out]`; the result is `[..., len, out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() < 2 || ws.len() != 3 || ws[1] != xs[xs.len() - 1] {
            return Err(Error::shape("conv1d", &xs, &ws));
        }
        let (out_ch, in_ch, k) = (ws[0], ws[1], ws[2]);
        if k % 2 == 0 {
            return Err(Error::contract(format!("conv1d kernel size {k} must be odd")));
        }
        if self.shape(b) != [out_ch] {
            return Err(Error::shape("conv1d bias", self.shape(b), &[out_ch]));
        }
        let len = xs[xs.len() - 2];
        let batch: usize = xs[..xs.len() - 2].iter().product();
        let pad = k / 2;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; batch * len * out_ch];
        for n in 0..batch {
            let xb = &xd[n * len * in_ch..(n + 1) * len * in_ch];
            for t in 0..len {
                let orow = &mut out[(n * len + t) * out_ch..(n * len + t + 1) * out_ch];
                orow.copy_from_slice(bd);
                for j in 0..k {
                    let src = t + j;
                    if src < pad || src - pad >= len {
                        continue;
                    }
                    let xr = &xb[(src - pad) * in_ch..(src - pad + 1) * in_ch];
                    for (o, ov) in orow.iter_mut().enumerate() {
                        let wrow = &wd[o * in_ch * k..(o + 1) * in_ch * k];
                        let mut acc = 0.0;
                        for (c, xv) in xr.iter().enumerate() {
                            acc += wrow[c * k + j] * xv;
                        }
                        *ov += acc;
                    }
                }
            }
        }
        let mut shape = xs;
        let last = shape.len() - 1;
        shape[last] = out_ch;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv1d { x, w, b }, rg))
    }

    /// Non-overlapping max-pooling along the length axis of `[..., len, ch]`.
    /// A trailing partial window is pooled as-is; ties go to the first index.
    pub fn maxpool1d(&mut self, x: Var, pool: usize) -> Result<Var> {
        if pool < 1 {
            return Err(Error::contract("maxpool window must be at least 1"));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("maxpool1d", &xs, &[pool]));
        }
        let ch = xs[xs.len() - 1];
        let len = xs[xs.len() - 2];
        let batch: usize = xs[..xs.len() - 2].iter().product();
        let out_len = len.div_ceil(pool);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(batch * out_len * ch);
        let mut argmax = Vec::with_capacity(batch * out_len * ch);
        for n in 0..batch {
            for w in 0..out_len {
                let lo = w * pool;
                let hi = ((w + 1) * pool).min(len);
                for c in 0..ch {
                    let mut best = (n * len + lo) * ch + c;
                    for t in lo + 1..hi {
                        let idx = (n * len + t) * ch + c;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = xs;
        let l = shape.len() - 2;
        shape[l] = out_len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool { x, argmax }, rg))
    }

    /// Multiplies by a constant mask of the same length (used by dropout).
    pub fn mask_mul(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::shape("mask_mul", self.shape(a), &[mask.len()]));
        }
        let data = self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MaskMul(a, mask), rg))
    }

    /// Population variance `(1/c) sum (x_i - mean)^2` of all elements.
    pub fn pop_variance(&mut self, a: Var) -> Result<Var> {
        let d = self.value(a).data();
        if d.is_empty() {
            return Err(Error::contract("variance of an empty tensor"));
        }
        let n = d.len() as f64;
        let mu = d.iter().sum::<f64>() / n;
        let v = d.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(v), Op::PopVariance(a), rg))
    }

    /// Backpropagates from a scalar `loss`. Allowed once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::contract(
                "tape already backpropagated; build a new tape for the next step",
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) | Op::Gather { .. } => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                // dA = G * B^T, dB = A^T * G
                acc(*a, &mut |ga| gemm(m, n, k, g, false, bv, true, ga, 1.0));
                acc(*b, &mut |gb| gemm(k, m, n, av, true, g, false, gb, 1.0));
            }
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let cols = bv.len();
                let bi = |i: usize| if *broadcast { i % cols } else { i };
                match kind {
                    BinKind::Add => acc(*a, &mut |ga| add_into(ga, g)),
                    BinKind::Sub => acc(*a, &mut |ga| add_into(ga, g)),
                    BinKind::Mul => acc(*a, &mut |ga| {
                        for (j, (d, gv)) in ga.iter_mut().zip(g).enumerate() {
                            *d += gv * bv[bi(j)];
                        }
                    }),
                }
                let sign = if *kind == BinKind::Sub { -1.0 } else { 1.0 };
                acc(*b, &mut |gb| {
                    for (j, gv) in g.iter().enumerate() {
                        let local = match kind {
                            BinKind::Mul => av[j],
                            _ => sign,
                        };
                        gb[bi(j)] += gv * local;
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |ga| {
                for (d, gv) in ga.iter_mut().zip(g) {
                    *d += gv * f;
                }
            }),
            Op::Unary(kind, a) => {
                let y = out.data();
                acc(*a, &mut |ga| match kind {
                    UnaryKind::Sigmoid => {
                        for ((d, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                            *d += gv * yv * (1.0 - yv);
                        }
                    }
                    UnaryKind::Tanh => {
                        for ((d, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                            *d += gv * (1.0 - yv * yv);
                        }
                    }
                    UnaryKind::Relu => {
                        for ((d, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                            if *yv > 0.0 {
                                *d += gv;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len().max(1) as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::ReduceAxis { input, axis, mean } => {
                let shape = nodes[input.0].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let scale = if *mean && len > 0 { 1.0 / len as f64 } else { 1.0 };
                acc(*input, &mut |ga| {
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            for t in 0..inner {
                                ga[base + t] += g[o * inner + t] * scale;
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in inputs {
                    let chunk = nodes[p.0].value.shape()[*axis] * inner;
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            add_into(
                                &mut gp[o * chunk..(o + 1) * chunk],
                                &g[o * total + offset..o * total + offset + chunk],
                            );
                        }
                    });
                    offset += chunk;
                }
            }
            Op::SliceRows { input, start } => {
                let cols = nodes[input.0].value.shape()[1];
                acc(*input, &mut |ga| add_into(&mut ga[start * cols..start * cols + g.len()], g));
            }
            Op::SliceCols { input, start } => {
                let cols = nodes[input.0].value.shape()[1];
                let width = out.shape()[1];
                acc(*input, &mut |ga| {
                    for (r, grow) in g.chunks(width.max(1)).enumerate() {
                        add_into(&mut ga[r * cols + start..r * cols + start + width], grow);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Softmax(a) => {
                let (rows, cols) = out.rows_cols();
                let y = out.data();
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { probs, targets } => {
                let p = &nodes[probs.0].value;
                let (rows, _) = p.rows_cols();
                let pd = p.data();
                acc(*probs, &mut |gp| {
                    for (j, (&pv, &tv)) in pd.iter().zip(targets).enumerate() {
                        if tv != 0.0 && pv > PROB_CLAMP && pv < 1.0 - PROB_CLAMP {
                            gp[j] -= g[0] * tv / (pv * rows as f64);
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let ws = nodes[w.0].value.shape();
                let (out_ch, in_ch, k) = (ws[0], ws[1], ws[2]);
                let len = xs[xs.len() - 2];
                let batch: usize = xs[..xs.len() - 2].iter().product();
                let pad = k / 2;
                let xd = nodes[x.0].value.data();
                let wd = nodes[w.0].value.data();
                acc(*b, &mut |gb| {
                    for row in g.chunks(out_ch) {
                        add_into(gb, row);
                    }
                });
                let taps = |mut f: Box<dyn FnMut(usize, usize, usize, usize, usize) + '_>| {
                    for n in 0..batch {
                        for t in 0..len {
                            for j in 0..k {
                                let src = t + j;
                                if src < pad || src - pad >= len {
                                    continue;
                                }
                                f(n, t, j, src - pad, 0);
                            }
                        }
                    }
                };
                acc(*w, &mut |gw| {
                    taps(Box::new(|n, t, j, s, _| {
                        let grow = &g[(n * len + t) * out_ch..(n * len + t + 1) * out_ch];
                        let xr = &xd[(n * len + s) * in_ch..(n * len + s + 1) * in_ch];
                        for (o, gv) in grow.iter().enumerate() {
                            for (c, xv) in xr.iter().enumerate() {
                                gw[(o * in_ch + c) * k + j] += gv * xv;
                            }
                        }
                    }))
                });
                acc(*x, &mut |gx| {
                    taps(Box::new(|n, t, j, s, _| {
                        let grow = &g[(n * len + t) * out_ch..(n * len + t + 1) * out_ch];
                        let gxr = &mut gx[(n * len + s) * in_ch..(n * len + s + 1) * in_ch];
                        for (o, gv) in grow.iter().enumerate() {
                            for (c, d) in gxr.iter_mut().enumerate() {
                                *d += gv * wd[(o * in_ch + c) * k + j];
                            }
                        }
                    }))
                });
            }
            Op::MaxPool { x, argmax } => acc(*x, &mut |gx| {
                for (gv, &src) in g.iter().zip(argmax) {
                    gx[src] += gv;
                }
            }),
            Op::MaskMul(a, mask) => acc(*a, &mut |ga| {
                for ((d, gv), m) in ga.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }),
            Op::PopVariance(a) => {
                let d = nodes[a.0].value.data();
                let n = d.len() as f64;
                let mu = d.iter().sum::<f64>() / n;
                acc(*a, &mut |ga| {
                    for (dst, x) in ga.iter_mut().zip(d) {
                        *dst += g[0] * 2.0 * (x - mu) / n;
                    }
                });
            }
        }
    }

    /// Gradient of the last backpropagated loss with respect to `v`.
    /// Nodes the loss does not depend on get zeros.
    pub fn grad(&self, v: Var) -> Result<Vec<f64>> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::contract("grad requested before backward"))?;
        Ok(grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]))
    }

    /// Adds parameter gradients from this tape into `store`. Gathered table
    /// rows are scattered back; frozen rows receive nothing.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::contract("accumulate_param_grads before backward"))?;
        for (node, g) in self.nodes.iter().zip(grads) {
            let Some(g) = g else { continue };
            match &node.op {
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    if p.frozen_rows.is_empty() {
                        add_into(&mut p.grad, g);
                    } else {
                        let (_, cols) = p.value.rows_cols();
                        for (r, (dst, src)) in p.grad.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                            if !p.frozen_rows.get(r).copied().unwrap_or(false) {
                                add_into(dst, src);
                            }
                        }
                    }
                }
                Op::Gather { table, rows } => {
                    let p = store.get_mut(*table);
                    let (_, d) = p.value.rows_cols();
                    for (i, &r) in rows.iter().enumerate() {
                        if !p.frozen_rows.get(r).copied().unwrap_or(false) {
                            add_into(&mut p.grad[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i2, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_of_zeros_is_zero() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let any = tape.constant(t(&[3, 4], &(0..12).map(f64::from).collect::<Vec<_>>()));
        let y = tape.matmul(z, any).unwrap();
        assert_eq!(tape.shape(y), &[2, 4]);
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn elementwise_spot_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        let th = tape.tanh(z);
        assert_eq!(tape.value(s).item().unwrap(), 0.5);
        assert_eq!(tape.value(th).item().unwrap(), 0.0);
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let m = tape.elementwise(ElementwiseOp::Mul, a, Some(b)).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 8.0]);
    }

    #[test]
    fn elementwise_rejects_incompatible_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.elementwise(ElementwiseOp::Add, a, None).is_err());
    }

    #[test]
    fn bias_broadcast_over_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 2]), true);
        let b = tape.leaf(Tensor::vector(vec![1.0, -1.0]), true);
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.sum(a);
        assert_eq!(tape.value(s).item().unwrap(), 6.0);
        let b = tape.constant(Tensor::vector(vec![2.0, 4.0]));
        let m = tape.reduce(ReduceOp::Mean, b, None).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 3.0);
        let c = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s0 = tape.reduce(ReduceOp::Sum, c, Some(0)).unwrap();
        assert_eq!(tape.value(s0).data(), &[4.0, 6.0]);
        assert!(tape.reduce(ReduceOp::Sum, c, Some(2)).is_err());
    }

    #[test]
    fn concat_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 2.0, 4.0]);

        let e = tape.constant(Tensor::zeros(&[0, 1]));
        let same = tape.concat(&[a, e], 0).unwrap();
        assert_eq!(tape.value(same), tape.value(a));

        let hf = tape.constant(Tensor::zeros(&[1, 64]));
        let hb = tape.constant(Tensor::zeros(&[1, 64]));
        let h = tape.concat(&[hf, hb], 1).unwrap();
        assert_eq!(tape.shape(h), &[1, 128]);

        let bad = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(tape.concat(&[a, bad], 1).is_err());
    }

    #[test]
    fn backward_spot_gradients() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![0.5, -1.0, 2.0]), true);
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), vec![1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let u = tape.leaf(Tensor::vector(vec![7.0]), true);
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), vec![2.0, 4.0]);
        assert_eq!(tape.grad(u).unwrap(), vec![0.0]);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -3.0]), true);
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_needs_scalar_and_runs_once() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let p = tape.softmax(z).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
        let bad = tape.constant(Tensor::vector(vec![f64::NAN, 0.0]));
        assert!(tape.softmax(bad).is_err());
    }

    #[test]
    fn maxpool_routes_gradient_to_first_max() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4, 1], &[2.0, 2.0, 1.0, 5.0]), true);
        let p = tape.maxpool1d(x, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 5.0]);
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn gather_scatter_skips_frozen_rows() {
        let mut store = ParamStore::new();
        let table = store
            .add("emb", ParamGroup::Extractor, t(&[3, 2], &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        store.set_frozen_rows(table, vec![true, false, true]).unwrap();
        let mut tape = Tape::new();
        let rows = tape.gather(&store, table, &[1, 2, 1, 0]).unwrap();
        assert_eq!(tape.value(rows).data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 0.0, 0.0]);
        let s = tape.sum(rows);
        tape.backward(s).unwrap();
        tape.accumulate_param_grads(&mut store).unwrap();
        assert_eq!(store.grad(table), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_binary_half() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[1, 2], &[0.5, 0.5]));
        let l = tape.cross_entropy(p, &t(&[1, 2], &[0.0, 1.0])).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn pop_variance_hand_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![0.2, 0.8]));
        let v = tape.pop_variance(a).unwrap();
        assert!((tape.value(v).item().unwrap() - 0.09).abs() < 1e-15);
    }
}
