//! Reverse-mode differentiation over a dynamically built tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep. Leaf gradients accumulate
//! across `backward` calls until [`Graph::zero_grad`] is called; intermediate
//! gradients are recomputed on every call.

use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Gelu(Var),
    LogSigmoid(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Attention {
        qkv: Var,
        segments: Vec<(usize, usize)>,
        n_heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
    SoftCrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Arc<Tensor>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Arc<Tensor>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `c = beta * c + a * b` for row/column strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Log-softmax of one row, written into `out`.
pub(crate) fn log_softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node. Gradients are kept only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Leaf sharing storage with the caller (parameters are bound this way).
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node, if any has been computed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.unary(a, |x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let t = self.unary(a, |x| x + c);
        self.push(t, Op::Offset(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| gelu(x).0);
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, log_sigmoid);
        self.push(t, Op::LogSigmoid(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x * x);
        self.push(t, Op::Square(a), &[a])
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.numel() != tx.cols() {
            return Err(shape_err("add_bias", tx, tb));
        }
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, bias), &[x, bias]))
    }

    // ---- linear algebra ---------------------------------------------

    /// `a [m,k] @ b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), &mut out, 0.0);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a [m,k] @ b[n,k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (1, k), &mut out, 0.0);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMulNT(a, b), &[a, b]))
    }

    // ---- row-wise normalisations ------------------------------------

    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = vec![0.0; ta.numel()];
        for (row, o) in ta.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_into(row, o);
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = vec![0.0; ta.numel()];
        for (row, o) in ta.data().chunks(c).zip(out.chunks_mut(c)) {
            log_softmax_into(row, o);
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::LogSoftmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.numel() != c {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.numel() != c {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    // ---- indexing ----------------------------------------------------

    /// Embedding lookup: rows `ids` of a `[n, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, d) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(invalid(format!("gather index {i} out of range for {n} rows")));
            }
            out.extend_from_slice(tt.row(i));
        }
        let t = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat_rows of nothing"))?;
        let d = self.value(first).cols();
        let mut out = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            if tp.cols() != d || tp.shape().len() != 2 {
                return Err(shape_err("concat_rows", self.value(first), tp));
            }
            out.extend_from_slice(tp.data());
        }
        let rows = out.len() / d;
        let t = Tensor::matrix(rows, d, out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= tx.rows() {
                return Err(invalid(format!("select_rows index {r} out of range for {} rows", tx.rows())));
            }
            out.extend_from_slice(tx.row(r));
        }
        let t = Tensor::matrix(rows.len(), d, out)?;
        Ok(self.push(t, Op::SelectRows(x, rows.to_vec()), &[x]))
    }

    // ---- attention ---------------------------------------------------

    /// Causal multi-head self-attention over packed sequences.
    ///
    /// `qkv` is `[N, 3d]` with query, key and value blocks side by side;
    /// `segments` lists `(start_row, len)` of each sequence. Attention never
    /// crosses a segment boundary and position `i` sees only `j <= i`.
    pub fn causal_attention(&mut self, qkv: Var, segments: &[(usize, usize)], n_heads: usize) -> Result<Var> {
        let t = self.value(qkv);
        if t.shape().len() != 2 || t.cols() % (3 * n_heads) != 0 {
            return Err(invalid(format!(
                "attention input shape {:?} incompatible with {n_heads} heads",
                t.shape()
            )));
        }
        let n = t.rows();
        let d = t.cols() / 3;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let w = 3 * d;
        let qkv_data = t.data();
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::new();
        for &(start, len) in segments {
            if start + len > n {
                return Err(invalid(format!("segment ({start},{len}) exceeds {n} rows")));
            }
            for h in 0..n_heads {
                let base = probs.len();
                probs.resize(base + len * len, 0.0);
                for i in 0..len {
                    let qi = &qkv_data[(start + i) * w + h * dh..][..dh];
                    let p = &mut probs[base + i * len..base + i * len + len];
                    for j in 0..=i {
                        let kj = &qkv_data[(start + j) * w + d + h * dh..][..dh];
                        p[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let max = p[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in &mut p[..=i] {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in &mut p[..=i] {
                        *v /= sum;
                    }
                    let o = &mut out[(start + i) * d + h * dh..][..dh];
                    for j in 0..=i {
                        let vj = &qkv_data[(start + j) * w + 2 * d + h * dh..][..dh];
                        let a = p[j];
                        for (ov, vv) in o.iter_mut().zip(vj) {
                            *ov += a * vv;
                        }
                    }
                }
            }
        }
        let t = Tensor::matrix(n, d, out)?;
        Ok(self.push(
            t,
            Op::Attention {
                qkv,
                segments: segments.to_vec(),
                n_heads,
                probs,
            },
            &[qkv],
        ))
    }

    // ---- losses and reductions --------------------------------------

    /// Mean negative log-likelihood over `(row, class)` targets of a logits matrix.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        if targets.is_empty() {
            return Err(invalid("cross_entropy needs at least one target position"));
        }
        let tl = self.value(logits);
        let v = tl.cols();
        let mut probs = vec![0.0; targets.len() * v];
        let mut loss = 0.0;
        for (k, &(r, c)) in targets.iter().enumerate() {
            if r >= tl.rows() || c >= v {
                return Err(invalid(format!("cross_entropy target ({r},{c}) out of range")));
            }
            let row = tl.row(r);
            let p = &mut probs[k * v..(k + 1) * v];
            log_softmax_into(row, p);
            loss -= p[c];
            for x in p.iter_mut() {
                *x = x.exp();
            }
        }
        let t = Tensor::scalar(loss / targets.len() as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `-sum_r sum_v target[r, v] * log softmax(logits[rows[r]])[v]`.
    pub fn soft_cross_entropy(&mut self, logits: Var, rows: &[usize], targets: Arc<Tensor>) -> Result<Var> {
        let tl = self.value(logits);
        let v = tl.cols();
        if targets.rows() != rows.len() || targets.cols() != v {
            return Err(shape_err("soft_cross_entropy", tl, &targets));
        }
        let mut probs = vec![0.0; rows.len() * v];
        let mut loss = 0.0;
        for (k, &r) in rows.iter().enumerate() {
            if r >= tl.rows() {
                return Err(invalid(format!("soft_cross_entropy row {r} out of range")));
            }
            let p = &mut probs[k * v..(k + 1) * v];
            log_softmax_into(tl.row(r), p);
            for (lp, tp) in p.iter_mut().zip(targets.row(k)) {
                loss -= tp * *lp;
                *lp = lp.exp();
            }
        }
        let t = Tensor::scalar(loss);
        Ok(self.push(
            t,
            Op::SoftCrossEntropy {
                logits,
                rows: rows.to_vec(),
                targets,
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sum of several scalar nodes, in the given order.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter();
        let mut acc = *it.next().ok_or_else(|| invalid("add_all of nothing"))?;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    // ---- backward ----------------------------------------------------

    /// Back-propagates from a scalar node. Leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes, loss, |g| g[0] += 1.0);
        for id in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &mut rest[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = node.grad.take() else { continue };
            backprop(before, &node.op, &node.value, &grad);
        }
        Ok(())
    }
}

fn accumulate(nodes: &mut [Node], v: Var, f: impl FnOnce(&mut [f64])) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let n = node.value.numel();
    f(node.grad.get_or_insert_with(|| vec![0.0; n]));
}

fn val(nodes: &[Node], v: Var) -> Arc<Tensor> {
    nodes[v.0].value.clone()
}

fn backprop(nodes: &mut [Node], op: &Op, out: &Tensor, g: &[f64]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            accumulate(nodes, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            accumulate(nodes, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(nodes, *a), val(nodes, *b));
            accumulate(nodes, *a, |ga| {
                for ((x, y), w) in ga.iter_mut().zip(g).zip(tb.data()) {
                    *x += y * w;
                }
            });
            accumulate(nodes, *b, |gb| {
                for ((x, y), w) in gb.iter_mut().zip(g).zip(ta.data()) {
                    *x += y * w;
                }
            });
        }
        Op::Scale(a, c) => accumulate(nodes, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
        Op::Offset(a) => accumulate(nodes, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
        Op::AddBias(x, b) => {
            accumulate(nodes, *x, |gx| gx.iter_mut().zip(g).for_each(|(p, q)| *p += q));
            accumulate(nodes, *b, |gb| {
                let c = gb.len();
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                }
            });
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(nodes, *a), val(nodes, *b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            // dA = G B^T, dB = A^T G
            accumulate(nodes, *a, |ga| gemm(m, n, k, g, (n, 1), tb.data(), (1, n), ga, 1.0));
            accumulate(nodes, *b, |gb| gemm(k, m, n, ta.data(), (1, k), g, (n, 1), gb, 1.0));
        }
        Op::MatMulNT(a, b) => {
            let (ta, tb) = (val(nodes, *a), val(nodes, *b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
            // out = A B^T: dA = G B, dB = G^T A
            accumulate(nodes, *a, |ga| gemm(m, n, k, g, (n, 1), tb.data(), (k, 1), ga, 1.0));
            accumulate(nodes, *b, |gb| gemm(n, m, k, g, (1, n), ta.data(), (k, 1), gb, 1.0));
        }
        Op::Gelu(a) => {
            let ta = val(nodes, *a);
            accumulate(nodes, *a, |ga| {
                for ((x, y), v) in ga.iter_mut().zip(g).zip(ta.data()) {
                    *x += y * gelu(*v).1;
                }
            });
        }
        Op::LogSigmoid(a) => {
            let ta = val(nodes, *a);
            accumulate(nodes, *a, |ga| {
                for ((x, y), v) in ga.iter_mut().zip(g).zip(ta.data()) {
                    *x += y * sigmoid(-*v);
                }
            });
        }
        Op::Square(a) => {
            let ta = val(nodes, *a);
            accumulate(nodes, *a, |ga| {
                for ((x, y), v) in ga.iter_mut().zip(g).zip(ta.data()) {
                    *x += 2.0 * y * v;
                }
            });
        }
        Op::Softmax(a) => {
            let c = out.cols();
            accumulate(nodes, *a, |ga| {
                for ((gx, gy), y) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let dot: f64 = gy.iter().zip(y).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        gx[j] += y[j] * (gy[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let c = out.cols();
            accumulate(nodes, *a, |ga| {
                for ((gx, gy), y) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let s: f64 = gy.iter().sum();
                    for j in 0..c {
                        gx[j] += gy[j] - y[j].exp() * s;
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let tg = val(nodes, *gain);
            let c = tg.numel();
            accumulate(nodes, *gain, |gg| {
                for (gy, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        gg[j] += gy[j] * xh[j];
                    }
                }
            });
            accumulate(nodes, *bias, |gb| {
                for gy in g.chunks(c) {
                    gb.iter_mut().zip(gy).for_each(|(p, q)| *p += q);
                }
            });
            accumulate(nodes, *x, |gx| {
                let mut dxhat = vec![0.0; c];
                for (r, ((gxr, gy), xh)) in gx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                    for j in 0..c {
                        dxhat[j] = gy[j] * tg.data()[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(xh).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gxr[j] += rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
            });
        }
        Op::Gather { table, ids } => {
            accumulate(nodes, *table, |gt| {
                let d = out.cols();
                for (k, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[k * d + j];
                    }
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.numel();
                accumulate(nodes, p, |gp| {
                    gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, b)| *a += b)
                });
                offset += len;
            }
        }
        Op::SelectRows(x, rows) => {
            let d = out.cols();
            accumulate(nodes, *x, |gx| {
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        gx[r * d + j] += g[k * d + j];
                    }
                }
            });
        }
        Op::Attention {
            qkv,
            segments,
            n_heads,
            probs,
        } => {
            let t = val(nodes, *qkv);
            let d = out.cols();
            let w = 3 * d;
            let dh = d / n_heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let x = t.data();
            accumulate(nodes, *qkv, |gq| {
                let mut base = 0;
                let mut da = Vec::new();
                for &(start, len) in segments {
                    for h in 0..*n_heads {
                        let p = &probs[base..base + len * len];
                        base += len * len;
                        for i in 0..len {
                            let go = &g[(start + i) * d + h * dh..][..dh];
                            da.clear();
                            da.resize(i + 1, 0.0);
                            for j in 0..=i {
                                let vj = &x[(start + j) * w + 2 * d + h * dh..][..dh];
                                da[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                let a = p[i * len + j];
                                let gv = &mut gq[(start + j) * w + 2 * d + h * dh..][..dh];
                                gv.iter_mut().zip(go).for_each(|(u, o)| *u += a * o);
                            }
                            let dot: f64 = (0..=i).map(|j| p[i * len + j] * da[j]).sum();
                            for j in 0..=i {
                                let ds = p[i * len + j] * (da[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let qi_off = (start + i) * w + h * dh;
                                let kj_off = (start + j) * w + d + h * dh;
                                for e in 0..dh {
                                    let (qv, kv) = (x[qi_off + e], x[kj_off + e]);
                                    gq[qi_off + e] += ds * kv;
                                    gq[kj_off + e] += ds * qv;
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let v = nodes[logits.0].value.cols();
            let scale = g[0] / targets.len() as f64;
            accumulate(nodes, *logits, |gl| {
                for (k, &(r, c)) in targets.iter().enumerate() {
                    let p = &probs[k * v..(k + 1) * v];
                    let row = &mut gl[r * v..(r + 1) * v];
                    for j in 0..v {
                        row[j] += scale * p[j];
                    }
                    row[c] -= scale;
                }
            });
        }
        Op::SoftCrossEntropy {
            logits,
            rows,
            targets,
            probs,
        } => {
            let v = nodes[logits.0].value.cols();
            accumulate(nodes, *logits, |gl| {
                for (k, &r) in rows.iter().enumerate() {
                    let p = &probs[k * v..(k + 1) * v];
                    let tgt = targets.row(k);
                    let mass: f64 = tgt.iter().sum();
                    let row = &mut gl[r * v..(r + 1) * v];
                    for j in 0..v {
                        row[j] += g[0] * (mass * p[j] - tgt[j]);
                    }
                }
            });
        }
        Op::Sum(a) => accumulate(nodes, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
        Op::Mean(a) => accumulate(nodes, *a, |ga| {
            let s = g[0] / ga.len() as f64;
            ga.iter_mut().for_each(|x| *x += s)
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let s = g.softmax(z);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn log_softmax_saturates() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(1, 2, vec![10.0, -10.0]).unwrap());
        let s = g.log_softmax(z);
        assert!(g.value(s).data()[0].abs() < 1e-8);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let a: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin()).collect();
        let i3 = g.constant(Tensor::identity(3));
        let av = g.constant(Tensor::matrix(3, 3, a.clone()).unwrap());
        let p = g.matmul(i3, av).unwrap();
        assert_eq!(g.value(p).data(), a.as_slice());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        // accumulation without reset
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
        g.zero_grad();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::matrix(1, 4, vec![0.3, -1.2, 2.0, 0.1]).unwrap(), true);
        let s = g.softmax(z);
        let t = g.sum(s);
        g.backward(t).unwrap();
        assert!(g.grad(z).unwrap().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::zeros(&[2]), true);
        assert!(g.backward(z).is_err());
    }

    #[test]
    fn attention_first_position_copies_value() {
        let mut g = Graph::new();
        // one head, d = 2: row = [q q k k v v]
        let x = g.constant(Tensor::matrix(2, 6, vec![1., 0., 1., 0., 5., 6., 0., 1., 0., 1., 7., 8.]).unwrap());
        let o = g.causal_attention(x, &[(0, 2)], 1).unwrap();
        assert_eq!(g.value(o).row(0), &[5.0, 6.0]);
    }
}
