//! Recorded operation graph with reverse-mode gradients.
//!
//! Every operation appends one node to a tape. Nodes only reference earlier
//! nodes, so tape order is a topological order and the backward pass is a
//! single reverse sweep.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage precision of forward values.
///
/// `F32` rounds every recorded value to single precision; arithmetic still
/// runs in `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    RowNormalize(Var),
    L2NormalizeRows(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        pad_left: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    PadRows {
        x: Var,
        offset: usize,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Diag(Var),
    OffDiagLogSumExp {
        x: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Statistics captured by a batch-normalization node run on batch statistics.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance over `count` values per channel.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Single-owner tape of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Gradients of a scalar loss with respect to every node that reaches it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, &[s])),
    }
}

fn dims3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::shape(op, &[s])),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &[a.shape(), b.shape()]));
    }
    Ok(())
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Split a shape around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Branch taken at every non-smooth point of the tape: the sign of each
    /// relu input and the winner of each max-pool pair. Two evaluations with
    /// equal signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => sig.extend(self.nodes[a.0].value.values().iter().map(|&x| (x > 0.0) as usize)),
                Op::MaxPool1d { argmax, .. } => sig.extend_from_slice(argmax),
                _ => {}
            }
        }
        sig
    }

    fn push(&mut self, op: &'static str, mut value: Tensor, kind: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        if self.precision == Precision::F32 {
            value.round_to_f32();
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let mut value = value;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        if self.precision == Precision::F32 {
            value.round_to_f32();
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", ta)?;
        let (k2, n) = dims2("matmul", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul", &[ta.shape(), tb.shape()]));
        }
        let out = matmul_raw(ta.values(), tb.values(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = dims2("transpose", ta)?;
        let out = transpose_raw(ta.values(), m, n);
        self.push("transpose", Tensor::from_parts(vec![n, m], out), Op::Transpose(a), &[a])
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let vals = ta.values().iter().zip(tb.values()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), vals))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (m, n) = dims2("add_bias", ta)?;
        if tb.shape() != [n] {
            return Err(Error::shape("add_bias", &[ta.shape(), tb.shape()]));
        }
        let mut out = ta.values().to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(tb.values()) {
                *o += b;
            }
        }
        self.push("add_bias", Tensor::from_parts(vec![m, n], out), Op::AddBias(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * factor);
        self.push("scale", t, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push("relu", t, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::exp);
        self.push("exp", t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::ln);
        self.push("log", t, Op::Log(a), &[a])
    }

    /// Row-wise softmax of a matrix, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = dims2("softmax_rows", ta)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(ta.row(i), &mut out[i * n..(i + 1) * n]);
        }
        self.push("softmax_rows", Tensor::from_parts(vec![m, n], out), Op::SoftmaxRows(a), &[a])
    }

    /// Divides every row by its sum. Rows must have a positive sum.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = dims2("row_normalize", ta)?;
        let mut out = ta.values().to_vec();
        for row in out.chunks_mut(n).take(m) {
            let s: f64 = row.iter().sum();
            if s <= 0.0 {
                return Err(Error::NonFinite { op: "row_normalize" });
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push("row_normalize", Tensor::from_parts(vec![m, n], out), Op::RowNormalize(a), &[a])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = dims2("l2_normalize_rows", ta)?;
        let mut out = ta.values().to_vec();
        for row in out.chunks_mut(n).take(m) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::NonFinite { op: "l2_normalize_rows" });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        self.push(
            "l2_normalize_rows",
            Tensor::from_parts(vec![m, n], out),
            Op::L2NormalizeRows(a),
            &[a],
        )
    }

    /// 1-D cross-correlation with zero "same" padding.
    ///
    /// `x`: `[batch, c_in, len]`, `w`: `[c_out, c_in, kernel]`, `b`: `[c_out]`.
    /// For even kernels the extra padding goes on the right.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (batch, c_in, len) = dims3("conv1d", tx)?;
        let (c_out, c_in2, kernel) = dims3("conv1d", tw)?;
        if c_in != c_in2 || tb.shape() != [c_out] {
            return Err(Error::shape("conv1d", &[tx.shape(), tw.shape(), tb.shape()]));
        }
        let pad_left = (kernel - 1) / 2;
        let (xv, wv, bv) = (tx.values(), tw.values(), tb.values());
        let mut out = vec![0.0; batch * c_out * len];
        for n in 0..batch {
            for o in 0..c_out {
                let orow = &mut out[(n * c_out + o) * len..(n * c_out + o + 1) * len];
                orow.iter_mut().for_each(|v| *v = bv[o]);
                for c in 0..c_in {
                    let xrow = &xv[(n * c_in + c) * len..(n * c_in + c + 1) * len];
                    let wrow = &wv[(o * c_in + c) * kernel..(o * c_in + c + 1) * kernel];
                    for (k, &wk) in wrow.iter().enumerate() {
                        for (t, ov) in orow.iter_mut().enumerate() {
                            let src = t + k;
                            if src < pad_left || src - pad_left >= len {
                                continue;
                            }
                            *ov += wk * xrow[src - pad_left];
                        }
                    }
                }
            }
        }
        self.push(
            "conv1d",
            Tensor::from_parts(vec![batch, c_out, len], out),
            Op::Conv1d { x, w, b, pad_left },
            &[x, w, b],
        )
    }

    /// Batch normalization over the batch and length axes of `[batch, ch, len]`
    /// (rank-2 `[batch, ch]` inputs are treated as `len = 1`).
    ///
    /// With `running = None` the batch statistics are used and captured on the
    /// node (see [`Graph::batch_stats`]); otherwise the supplied
    /// `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (batch, ch, len) = match tx.shape() {
            [a, b, c] => (*a, *b, *c),
            [a, b] => (*a, *b, 1),
            s => return Err(Error::shape("batch_norm", &[s])),
        };
        if tg.shape() != [ch] || tb.shape() != [ch] {
            return Err(Error::shape("batch_norm", &[tx.shape(), tg.shape(), tb.shape()]));
        }
        let xv = tx.values();
        let count = batch * len;
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => {
                if m.len() != ch || v.len() != ch {
                    return Err(Error::shape("batch_norm", &[tx.shape(), &[m.len()], &[v.len()]]));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for n in 0..batch {
                    for c in 0..ch {
                        for &v in &xv[(n * ch + c) * len..(n * ch + c + 1) * len] {
                            mean[c] += v;
                        }
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for n in 0..batch {
                    for c in 0..ch {
                        for &v in &xv[(n * ch + c) * len..(n * ch + c + 1) * len] {
                            var[c] += (v - mean[c]).powi(2);
                        }
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; xv.len()];
        for n in 0..batch {
            for c in 0..ch {
                let base = (n * ch + c) * len;
                for t in 0..len {
                    let xhat = (xv[base + t] - mean[c]) * inv_std[c];
                    out[base + t] = tg.values()[c] * xhat + tb.values()[c];
                }
            }
        }
        let shape = tx.shape().to_vec();
        self.push(
            "batch_norm",
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Batch statistics recorded by a batch-statistics `batch_norm` node.
    pub fn batch_stats(&self, v: Var) -> Option<BatchStats> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                mean,
                var,
                batch_stats: true,
                x,
                ..
            } => {
                let s = self.value(*x).shape();
                let count = s[0] * s.get(2).copied().unwrap_or(1);
                Some(BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                })
            }
            _ => None,
        }
    }

    /// Max pooling with kernel 2 and stride 2 along the last axis of
    /// `[batch, ch, len]`; a trailing odd element is dropped.
    pub fn maxpool1d(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (batch, ch, len) = dims3("maxpool1d", tx)?;
        let out_len = len / 2;
        if out_len == 0 {
            return Err(Error::shape("maxpool1d", &[tx.shape()]));
        }
        let xv = tx.values();
        let mut out = Vec::with_capacity(batch * ch * out_len);
        let mut argmax = Vec::with_capacity(batch * ch * out_len);
        for row in 0..batch * ch {
            for t in 0..out_len {
                let i = row * len + 2 * t;
                let pick = if xv[i + 1] > xv[i] { i + 1 } else { i };
                out.push(xv[pick]);
                argmax.push(pick);
            }
        }
        self.push(
            "maxpool1d",
            Tensor::from_parts(vec![batch, ch, out_len], out),
            Op::MaxPool1d { x, argmax },
            &[x],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &[&base]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.value(*v).shape()).collect();
                return Err(Error::shape("concat", &shapes));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.values()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let rows = tx.shape()[0];
        if start >= end || end > rows {
            return Err(Error::shape("slice_rows", &[tx.shape(), &[start, end]]));
        }
        let stride = tx.numel() / rows;
        let mut shape = tx.shape().to_vec();
        shape[0] = end - start;
        let out = tx.values()[start * stride..end * stride].to_vec();
        self.push("slice_rows", Tensor::from_parts(shape, out), Op::SliceRows { x, start }, &[x])
    }

    /// Embeds `x` into a zero tensor with `total_rows` rows, starting at `offset`.
    pub fn pad_rows(&mut self, x: Var, total_rows: usize, offset: usize) -> Result<Var> {
        let tx = self.value(x);
        let rows = tx.shape()[0];
        if offset + rows > total_rows {
            return Err(Error::shape("pad_rows", &[tx.shape(), &[total_rows, offset]]));
        }
        let stride = tx.numel() / rows;
        let mut shape = tx.shape().to_vec();
        shape[0] = total_rows;
        let mut out = vec![0.0; total_rows * stride];
        out[offset * stride..(offset + rows) * stride].copy_from_slice(tx.values());
        self.push("pad_rows", Tensor::from_parts(shape, out), Op::PadRows { x, offset }, &[x])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).values().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.values().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mse", ta, tb)?;
        let s = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / ta.numel() as f64;
        self.push("mse", Tensor::scalar(s), Op::Mse(a, b), &[a, b])
    }

    /// Mean cross-entropy of row logits `[batch, classes]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (m, n) = dims2("cross_entropy", t)?;
        if targets.len() != m || targets.iter().any(|&c| c >= n) {
            return Err(Error::shape("cross_entropy", &[t.shape(), &[targets.len()]]));
        }
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for (i, &c) in targets.iter().enumerate() {
            let row = t.row(i);
            softmax_row(row, &mut probs[i * n..(i + 1) * n]);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[c];
        }
        loss /= m as f64;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Diagonal of a square matrix.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = dims2("diag", t)?;
        if m != n {
            return Err(Error::shape("diag", &[t.shape()]));
        }
        let d = (0..n).map(|i| t.get2(i, i)).collect();
        self.push("diag", Tensor::vector(d), Op::Diag(a), &[a])
    }

    /// Per row `i` of a square matrix: `log sum_{j != i} exp(a_ij)`.
    pub fn off_diag_logsumexp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = dims2("off_diag_logsumexp", t)?;
        if m != n || n < 2 {
            return Err(Error::shape("off_diag_logsumexp", &[t.shape()]));
        }
        let mut weights = vec![0.0; n * n];
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = t.row(i);
            let max = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let e = (row[j] - max).exp();
                weights[i * n + j] = e;
                total += e;
            }
            for j in 0..n {
                weights[i * n + j] /= total;
            }
            out.push(max + total.ln());
        }
        self.push(
            "off_diag_logsumexp",
            Tensor::vector(out),
            Op::OffDiagLogSumExp { x: a, weights },
            &[a],
        )
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        let gv = g.values();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.nodes[a.0].requires_grad {
                    let bt = transpose_raw(tb.values(), k, n);
                    let ga = matmul_raw(gv, &bt, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.nodes[b.0].requires_grad {
                    let at = transpose_raw(ta.values(), m, k);
                    let gb = matmul_raw(&at, gv, k, m, n);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let ga = transpose_raw(gv, m, n);
                self.accumulate(grads, *a, Tensor::from_parts(vec![n, m], ga));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = gv.iter().zip(tb.values()).map(|(g, y)| g * y).collect();
                let gb = gv.iter().zip(ta.values()).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
                self.accumulate(grads, *b, Tensor::from_parts(tb.shape().to_vec(), gb));
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                let n = out.shape()[1];
                let mut gb = vec![0.0; n];
                for row in gv.chunks(n) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *bias, Tensor::vector(gb));
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|v| v * f)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let ga = gv
                    .iter()
                    .zip(x.values())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), ga));
            }
            Op::Exp(a) => {
                let ga = gv.iter().zip(out.values()).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), ga));
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let ga = gv.iter().zip(x.values()).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), ga));
            }
            Op::SoftmaxRows(a) => {
                let n = out.shape()[1];
                let mut ga = vec![0.0; out.numel()];
                for ((grow, yrow), orow) in gv.chunks(n).zip(out.values().chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o = y * (g - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), ga));
            }
            Op::RowNormalize(a) => {
                let x = self.value(*a);
                let n = out.shape()[1];
                let mut ga = vec![0.0; out.numel()];
                for (i, orow) in ga.chunks_mut(n).enumerate() {
                    let s: f64 = x.row(i).iter().sum();
                    let grow = &gv[i * n..(i + 1) * n];
                    let yrow = out.row(i);
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for (o, g) in orow.iter_mut().zip(grow) {
                        *o = (g - dot) / s;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), ga));
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let n = out.shape()[1];
                let mut ga = vec![0.0; out.numel()];
                for (i, orow) in ga.chunks_mut(n).enumerate() {
                    let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let grow = &gv[i * n..(i + 1) * n];
                    let yrow = out.row(i);
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o = (g - y * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), ga));
            }
            Op::Conv1d { x, w, b, pad_left } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (batch, c_in, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (c_out, kernel) = (tw.shape()[0], tw.shape()[2]);
                let (xv, wv) = (tx.values(), tw.values());
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; c_out];
                for n in 0..batch {
                    for o in 0..c_out {
                        let grow = &gv[(n * c_out + o) * len..(n * c_out + o + 1) * len];
                        gb[o] += grow.iter().sum::<f64>();
                        for c in 0..c_in {
                            let xoff = (n * c_in + c) * len;
                            let woff = (o * c_in + c) * kernel;
                            for k in 0..kernel {
                                let wk = wv[woff + k];
                                let mut acc = 0.0;
                                for (t, &gt) in grow.iter().enumerate() {
                                    let src = t + k;
                                    if src < *pad_left || src - pad_left >= len {
                                        continue;
                                    }
                                    let s = xoff + src - pad_left;
                                    acc += gt * xv[s];
                                    gx[s] += gt * wk;
                                }
                                gw[woff + k] += acc;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gx));
                self.accumulate(grads, *w, Tensor::from_parts(tw.shape().to_vec(), gw));
                self.accumulate(grads, *b, Tensor::vector(gb));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
                ..
            } => {
                let tx = self.value(*x);
                let gamma_v = self.value(*gamma).values();
                let ch = gamma_v.len();
                let batch = tx.shape()[0];
                let len = tx.numel() / (batch * ch);
                let m = (batch * len) as f64;
                let xv = tx.values();
                let mut ggamma = vec![0.0; ch];
                let mut gbeta = vec![0.0; ch];
                let mut sum_dxhat_xhat = vec![0.0; ch];
                let mut sum_dxhat = vec![0.0; ch];
                for n in 0..batch {
                    for c in 0..ch {
                        let base = (n * ch + c) * len;
                        for t in 0..len {
                            let xhat = (xv[base + t] - mean[c]) * inv_std[c];
                            let dy = gv[base + t];
                            ggamma[c] += dy * xhat;
                            gbeta[c] += dy;
                            sum_dxhat[c] += dy * gamma_v[c];
                            sum_dxhat_xhat[c] += dy * gamma_v[c] * xhat;
                        }
                    }
                }
                let mut gx = vec![0.0; xv.len()];
                for n in 0..batch {
                    for c in 0..ch {
                        let base = (n * ch + c) * len;
                        for t in 0..len {
                            let dxhat = gv[base + t] * gamma_v[c];
                            gx[base + t] = if *batch_stats {
                                let xhat = (xv[base + t] - mean[c]) * inv_std[c];
                                inv_std[c] / m * (m * dxhat - sum_dxhat[c] - xhat * sum_dxhat_xhat[c])
                            } else {
                                dxhat * inv_std[c]
                            };
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gx));
                self.accumulate(grads, *gamma, Tensor::vector(ggamma));
                self.accumulate(grads, *beta, Tensor::vector(gbeta));
            }
            Op::MaxPool1d { x, argmax } => {
                let tx = self.value(*x);
                let mut gx = vec![0.0; tx.numel()];
                for (g, &i) in gv.iter().zip(argmax) {
                    gx[i] += g;
                }
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gx));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape, gv.to_vec()));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let shape = self.value(*v).shape().to_vec();
                    let width = shape[*axis] * inner;
                    let mut gi = Vec::with_capacity(outer * width);
                    for o in 0..outer {
                        let start = o * total * inner + offset;
                        gi.extend_from_slice(&gv[start..start + width]);
                    }
                    offset += width;
                    self.accumulate(grads, *v, Tensor::from_parts(shape, gi));
                }
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let stride = tx.numel() / tx.shape()[0];
                let mut gx = vec![0.0; tx.numel()];
                gx[start * stride..start * stride + gv.len()].copy_from_slice(gv);
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gx));
            }
            Op::PadRows { x, offset } => {
                let tx = self.value(*x);
                let stride = tx.numel() / tx.shape()[0];
                let gx = gv[offset * stride..offset * stride + tx.numel()].to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gx));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, gv[0]));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let scale = gv[0] / t.numel() as f64;
                self.accumulate(grads, *a, Tensor::full(t.shape(), scale));
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let f = 2.0 * gv[0] / ta.numel() as f64;
                let ga: Vec<f64> = ta.values().iter().zip(tb.values()).map(|(x, y)| f * (x - y)).collect();
                let gb = ga.iter().map(|v| -v).collect();
                self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
                self.accumulate(grads, *b, Tensor::from_parts(tb.shape().to_vec(), gb));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let t = self.value(*logits);
                let n = t.shape()[1];
                let f = gv[0] / targets.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * f).collect();
                for (i, &c) in targets.iter().enumerate() {
                    gl[i * n + c] -= f;
                }
                self.accumulate(grads, *logits, Tensor::from_parts(t.shape().to_vec(), gl));
            }
            Op::Diag(a) => {
                let n = gv.len();
                let mut ga = vec![0.0; n * n];
                for i in 0..n {
                    ga[i * n + i] = gv[i];
                }
                self.accumulate(grads, *a, Tensor::from_parts(vec![n, n], ga));
            }
            Op::OffDiagLogSumExp { x, weights } => {
                let n = gv.len();
                let ga = weights
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * gv[k / n])
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(vec![n, n], ga));
            }
        }
    }
}
