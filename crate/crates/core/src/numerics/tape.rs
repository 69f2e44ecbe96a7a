//! Reverse-mode differentiation over a linear record of primitive
//! applications.
//!
//! A [`Tape`] borrows a [`ParamSet`] read-only; every primitive appends one
//! node holding its output value plus whatever it needs for the reverse
//! sweep. [`Tape::backward`] walks the record once, newest to oldest, and
//! returns per-parameter gradients. Nodes only reference older nodes, so the
//! record is acyclic by construction.

use super::kernels::{axpy, dot, log_sum_exp, matmul_acc, matmul_at_acc, matmul_bt_acc, softmax_in_place};
use super::params::{Gradients, ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Relu(Var),
    Concat(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Relu(_) => "relu",
            Op::Concat(_) => "concat",
            Op::SliceRows { .. } => "slice_rows",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    swept: bool,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
            swept: false,
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node { value: Some(value), op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Constant, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (ta.dims2(), tb.dims2());
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?)
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (ta.dims2(), tb.dims2());
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_bt",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Op::MatMulBt(a, b), Tensor::new(vec![m, n], out)?)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Add(a, b), out)
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (rows, cols) = ta.dims2();
        if tb.numel() != cols {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            for (x, b) in data[r * cols..(r + 1) * cols].iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::AddRow(a, bias), out)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Scale(a, s), out)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2();
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut data[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Softmax(a), out)
    }

    /// Per-row normalization to zero mean and unit variance followed by the
    /// affine map `gamma * x_hat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != cols || tb.numel() != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let mut normalized = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        let n = cols as f64;
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let xh = (row[c] - mean) * inv;
                normalized[r * cols + c] = xh;
                out[r * cols + c] = tg.data()[c] * xh + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            out,
        )
    }

    /// Embedding lookup: gathers rows of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, cols) = tt.dims2();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfRange {
                    what: "embedding table",
                    index: id,
                    size: rows,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Relu(a), out)
    }

    /// Stacks the rows of all inputs.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push(Op::Concat(parts.to_vec()), out)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        if start + len > rows {
            return Err(Error::OutOfRange {
                what: "row slice",
                index: start + len,
                size: rows,
            });
        }
        let data = tx.data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::new(vec![len, cols], data)?;
        self.push(Op::SliceRows { x, start }, out)
    }

    /// Causal multi-head scaled dot-product attention. `q`, `k` and `v` are
    /// `[len, d]` with heads laid out as contiguous column blocks; position
    /// `i` attends to positions `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        check_same("attention", tq, tk)?;
        check_same("attention", tq, tv)?;
        let (len, d) = tq.dims2();
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * len * len];
        let mut out = vec![0.0; len * d];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..len {
                let qi = &tq.data()[i * d..][cols.clone()];
                let p = &mut probs[(h * len + i) * len..(h * len + i) * len + i + 1];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(qi, &tk.data()[j * d..][cols.clone()]) * scale;
                }
                softmax_in_place(p);
                let oi = &mut out[i * d..][cols.clone()];
                for (j, &pj) in p.iter().enumerate() {
                    axpy(pj, &tv.data()[j * d..][cols.clone()], oi);
                }
            }
        }
        let out = Tensor::new(vec![len, d], out)?;
        self.push(Op::Attention { q, k, v, heads, probs }, out)
    }

    /// Mean cross-entropy over rows whose target is `Some`. Rows with a
    /// `None` target contribute neither loss nor gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, cols) = tl.dims2();
        if targets.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        let mut count = 0;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= cols {
                return Err(Error::OutOfRange {
                    what: "class index",
                    index: t,
                    size: cols,
                });
            }
            let row = tl.row(r);
            total += log_sum_exp(row) - row[t];
            let p = &mut probs[r * cols..(r + 1) * cols];
            p.copy_from_slice(row);
            softmax_in_place(p);
            count += 1;
        }
        if count == 0 {
            return Err(Error::InvalidArgument("cross_entropy: no supervised rows".into()));
        }
        let out = Tensor::scalar(total / count as f64);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            out,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Reverse sweep from a scalar. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.swept {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.swept = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut out = Gradients {
            grads: vec![None; self.params.len()],
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => accumulate_into(&mut out.grads[id.0], g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ((m, k), (_, n)) = (ta.dims2(), tb.dims2());
                    let mut da = vec![0.0; m * k];
                    matmul_bt_acc(g.data(), tb.data(), &mut da, m, n, k);
                    let mut db = vec![0.0; k * n];
                    matmul_at_acc(ta.data(), g.data(), &mut db, m, k, n);
                    self.send(&mut grads, *a, da);
                    self.send(&mut grads, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ((m, k), (n, _)) = (ta.dims2(), tb.dims2());
                    let mut da = vec![0.0; m * k];
                    matmul_acc(g.data(), tb.data(), &mut da, m, n, k);
                    let mut db = vec![0.0; n * k];
                    matmul_at_acc(g.data(), ta.data(), &mut db, m, n, k);
                    self.send(&mut grads, *a, da);
                    self.send(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    self.send(&mut grads, *a, g.data().to_vec());
                    self.send(&mut grads, *b, g.into_data());
                }
                Op::AddRow(a, bias) => {
                    let cols = g.cols();
                    let mut db = vec![0.0; cols];
                    for r in 0..g.rows() {
                        axpy(1.0, g.row(r), &mut db);
                    }
                    self.send(&mut grads, *bias, db);
                    self.send(&mut grads, *a, g.into_data());
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    let db = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    self.send(&mut grads, *a, da);
                    self.send(&mut grads, *b, db);
                }
                Op::Scale(a, s) => {
                    let da = g.data().iter().map(|v| v * s).collect();
                    self.send(&mut grads, *a, da);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let (rows, cols) = y.dims2();
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let s = dot(yr, gr);
                        for c in 0..cols {
                            da[r * cols + c] = yr[c] * (gr[c] - s);
                        }
                    }
                    self.send(&mut grads, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let tg = self.value(*gamma);
                    let (rows, cols) = g.dims2();
                    let n = cols as f64;
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    let mut dx = vec![0.0; rows * cols];
                    let mut dxh = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &normalized[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dgamma[c] += gr[c] * xh[c];
                            dbeta[c] += gr[c];
                            dxh[c] = gr[c] * tg.data()[c];
                        }
                        let sum_dxh: f64 = dxh.iter().sum();
                        let sum_dxh_xh = dot(&dxh, xh);
                        let inv = inv_std[r];
                        for c in 0..cols {
                            dx[r * cols + c] = inv / n * (n * dxh[c] - sum_dxh - xh[c] * sum_dxh_xh);
                        }
                    }
                    self.send(&mut grads, *x, dx);
                    self.send(&mut grads, *gamma, dgamma);
                    self.send(&mut grads, *beta, dbeta);
                }
                Op::Gather { table, ids } => {
                    let tt = self.value(*table);
                    let cols = tt.cols();
                    let mut dt = vec![0.0; tt.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, g.row(r), &mut dt[id * cols..(id + 1) * cols]);
                    }
                    self.send(&mut grads, *table, dt);
                }
                Op::Relu(a) => {
                    let y = node.value.as_ref().unwrap();
                    let da = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.send(&mut grads, *a, da);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        self.send(&mut grads, p, g.data()[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let tx = self.value(*x);
                    let cols = tx.cols();
                    let mut dx = vec![0.0; tx.numel()];
                    dx[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                    self.send(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *heads, probs, &g);
                    self.send(&mut grads, *q, dq);
                    self.send(&mut grads, *k, dk);
                    self.send(&mut grads, *v, dv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let cols = self.value(*logits).cols();
                    let scale = g.item() / *count as f64;
                    let mut dl = vec![0.0; probs.len()];
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        let row = &mut dl[r * cols..(r + 1) * cols];
                        for (d, p) in row.iter_mut().zip(&probs[r * cols..(r + 1) * cols]) {
                            *d = p * scale;
                        }
                        row[t] -= scale;
                    }
                    self.send(&mut grads, *logits, dl);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    self.send(&mut grads, *a, vec![g.item(); n]);
                }
            }
        }
        Ok(out)
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &Tensor,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (len, d) = tq.dims2();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; len * d];
        let mut dk = vec![0.0; len * d];
        let mut dv = vec![0.0; len * d];
        let mut dp = vec![0.0; len];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..len {
                let gi = &g.data()[i * d..][cols.clone()];
                let p = &probs[(h * len + i) * len..(h * len + i) * len + i + 1];
                for j in 0..=i {
                    dp[j] = dot(gi, &tv.data()[j * d..][cols.clone()]);
                    axpy(p[j], gi, &mut dv[j * d..][cols.clone()]);
                }
                let s = dot(p, &dp[..=i]);
                let qi = &tq.data()[i * d..][cols.clone()];
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds != 0.0 {
                        axpy(ds, &tk.data()[j * d..][cols.clone()], &mut dq[i * d..][cols.clone()]);
                        axpy(ds, qi, &mut dk[j * d..][cols.clone()]);
                    }
                }
            }
        }
        (dq, dk, dv)
    }

    fn send(&self, grads: &mut [Option<Tensor>], target: Var, data: Vec<f64>) {
        let shape = self.value(target).shape().to_vec();
        let t = Tensor::new(shape, data).expect("gradient shape");
        accumulate_into(&mut grads[target.0], t);
    }
}

fn accumulate_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}
