//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a
//! node holding its forward value and whatever it needs for the backward
//! pass; [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients with `+=`, so a value consumed at several sites receives the
//! sum of its contributions.

use super::tensor::{gemm, MatRef, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a batched multi-head attention call.
///
/// Queries are `batch * q_len` rows, keys and values `batch * k_len` rows;
/// all three share the model width, split evenly across `heads`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Nll {
        probs: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if any flowed there.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &str, a: [usize; 2], b: [usize; 2]) -> Error {
    Error::contract(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Attention probabilities of an attention node, laid out as
    /// `[batch][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<(&[f64], AttnLayout)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, layout, .. } => Some((probs, *layout)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf; gradients are retained for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            MatRef::row_major(self.value(a).data(), 0, k),
            MatRef::row_major(self.value(b).data(), 0, n),
            0.0,
            out.data_mut(),
            0,
            n,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa[1] != sb[1] {
            return Err(shape_err("matmul_t", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            MatRef::row_major(self.value(a).data(), 0, k),
            MatRef::transposed(self.value(b).data(), 0, k),
            0.0,
            out.data_mut(),
            0,
            n,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulT(a, b), ng))
    }

    /// Affine map applied to every row: `x * w^T + b` with `w` stored as
    /// `[out x in]` and `b` as `[1 x out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul_t(x, w)?;
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(sa[0], sa[1], data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds the `[1 x c]` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.value(a).shape(), self.value(row).shape());
        if sr[0] != 1 || sr[1] != sa[1] {
            return Err(shape_err("add_row", sa, sr));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_mut(sa[1].max(1)) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(sa[0], sa[1], data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, factor), ng)
    }

    /// Sum of all entries as a `[1 x 1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            let x = *v;
            *v = 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh());
        }
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Row-wise softmax. Entries with `mask[i] == false` are treated as
    /// `-inf` logits and come out as exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let src = self.value(x);
        let [rows, cols] = src.shape();
        if let Some(m) = mask {
            if m.len() != src.len() {
                return Err(Error::contract("softmax: mask length differs from input"));
            }
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let keep = |c: usize| mask.map_or(true, |m| m[r * cols + c]);
            softmax_row(src.row(r), keep, &mut out.data_mut()[r * cols..(r + 1) * cols])
                .map_err(|_| Error::contract(format!("softmax: row {r} is fully masked")))?;
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Row-wise layer normalization with `[1 x c]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let [rows, cols] = self.value(x).shape();
        for p in [gain, bias] {
            let s = self.value(p).shape();
            if s != [1, cols] {
                return Err(shape_err("layer_norm", [rows, cols], s));
            }
        }
        if cols == 0 {
            return Err(Error::contract("layer_norm: empty normalized axis"));
        }
        let src = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = Tensor::zeros(rows, cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let xh = (row[c] - mean) * inv;
                xhat[r * cols + c] = xh;
                out.data_mut()[r * cols + c] = g[c] * xh + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::contract(format!(
                "embedding: id {bad} out of range for table with {} rows",
                t.rows()
            )));
        }
        let out = t.select_rows(ids);
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-stochastic
    /// `probs`, over rows where `mask` is set. With no unmasked rows the
    /// loss is zero.
    pub fn nll(&mut self, probs: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let p = self.value(probs);
        let [rows, cols] = p.shape();
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::contract(format!(
                "nll: {rows} rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= cols {
                return Err(Error::contract(format!(
                    "nll: target {t} outside {cols} classes"
                )));
            }
            total -= p.get(r, t).ln();
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            ng,
        ))
    }

    /// Batched scaled dot-product multi-head attention. `key_mask` has one
    /// entry per key row; masked keys get zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        key_mask: &[bool],
    ) -> Result<Var> {
        let AttnLayout {
            batch,
            q_len,
            k_len,
            heads,
        } = layout;
        let d = self.value(q).cols();
        let (sq, sk, sv) = (
            self.value(q).shape(),
            self.value(k).shape(),
            self.value(v).shape(),
        );
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        if sq != [batch * q_len, d] || sk != [batch * k_len, d] || sv != sk {
            return Err(Error::contract(format!(
                "attention: shapes q {sq:?} k {sk:?} v {sv:?} do not match layout {layout:?}"
            )));
        }
        if key_mask.len() != batch * k_len {
            return Err(Error::contract("attention: key mask length mismatch"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let block = q_len * k_len;
        let mut probs = vec![0.0; batch * heads * block];
        let mut out = Tensor::zeros(batch * q_len, d);
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut scores = vec![0.0; block];
        for b in 0..batch {
            let mask = &key_mask[b * k_len..(b + 1) * k_len];
            if q_len > 0 && !mask.iter().any(|&m| m) {
                return Err(Error::contract(format!(
                    "attention: instance {b} has no unmasked keys"
                )));
            }
            for h in 0..heads {
                let q_off = b * q_len * d + h * dh;
                let k_off = b * k_len * d + h * dh;
                gemm(
                    q_len,
                    dh,
                    k_len,
                    MatRef::row_major(qd, q_off, d),
                    MatRef::transposed(kd, k_off, d),
                    0.0,
                    &mut scores,
                    0,
                    k_len,
                );
                let p_off = (b * heads + h) * block;
                let p = &mut probs[p_off..p_off + block];
                for i in 0..q_len {
                    let row = &mut scores[i * k_len..(i + 1) * k_len];
                    row.iter_mut().for_each(|s| *s *= scale);
                    softmax_row(row, |c| mask[c], &mut p[i * k_len..(i + 1) * k_len])
                        .expect("checked above");
                }
                gemm(
                    q_len,
                    k_len,
                    dh,
                    MatRef::row_major(p, 0, k_len),
                    MatRef::row_major(vd, k_off, d),
                    0.0,
                    out.data_mut(),
                    q_off,
                    d,
                );
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            ng,
        ))
    }

    /// Multiplies by a fixed keep mask (entries `0` or `1 / (1 - rate)`).
    pub fn dropout(&mut self, x: Var, keep: Vec<f64>) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(Error::contract("dropout: mask length mismatch"));
        }
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .zip(&keep)
            .for_each(|(o, k)| *o *= k);
        let ng = self.ng(x);
        Ok(self.push(out, Op::Dropout { x, keep }, ng))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(Error::contract(format!("select_rows: row {bad} out of range")));
        }
        let out = t.select_rows(rows);
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != [1, 1] {
            return Err(Error::contract("backward: loss must be a 1x1 scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|data| {
                    Tensor::new(n.value.rows(), n.value.cols(), data).expect("grad shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.ng(*a) {
                    let ga = grad_buf(grads, *a, m * k);
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::row_major(gout, 0, n),
                        MatRef::transposed(self.value(*b).data(), 0, n),
                        1.0,
                        ga,
                        0,
                        k,
                    );
                }
                if self.ng(*b) {
                    let gb = grad_buf(grads, *b, k * n);
                    gemm(
                        k,
                        m,
                        n,
                        MatRef::transposed(self.value(*a).data(), 0, k),
                        MatRef::row_major(gout, 0, n),
                        1.0,
                        gb,
                        0,
                        n,
                    );
                }
            }
            Op::MatMulT(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if self.ng(*a) {
                    let ga = grad_buf(grads, *a, m * k);
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::row_major(gout, 0, n),
                        MatRef::row_major(self.value(*b).data(), 0, k),
                        1.0,
                        ga,
                        0,
                        k,
                    );
                }
                if self.ng(*b) {
                    let gb = grad_buf(grads, *b, n * k);
                    gemm(
                        n,
                        m,
                        k,
                        MatRef::transposed(gout, 0, n),
                        MatRef::row_major(self.value(*a).data(), 0, k),
                        1.0,
                        gb,
                        0,
                        k,
                    );
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if self.ng(x) {
                        accumulate(grad_buf(grads, x, gout.len()), gout);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    accumulate(grad_buf(grads, *a, gout.len()), gout);
                }
                if self.ng(*row) {
                    let cols = self.value(*row).cols();
                    let gr = grad_buf(grads, *row, cols);
                    for chunk in gout.chunks(cols.max(1)) {
                        accumulate(gr, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let ga = grad_buf(grads, *a, gout.len());
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * vb[i];
                    }
                }
                if self.ng(*b) {
                    let gb = grad_buf(grads, *b, gout.len());
                    for i in 0..gout.len() {
                        gb[i] += gout[i] * va[i];
                    }
                }
            }
            Op::Scale(a, f) => {
                let ga = grad_buf(grads, *a, gout.len());
                for i in 0..gout.len() {
                    ga[i] += gout[i] * f;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let ga = grad_buf(grads, *a, n);
                ga.iter_mut().for_each(|g| *g += gout[0]);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let ga = grad_buf(grads, *a, gout.len());
                for i in 0..gout.len() {
                    let xi = x[i];
                    let u = GELU_C * (xi + 0.044715 * xi * xi * xi);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * xi * xi);
                    let d = 0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du;
                    ga[i] += gout[i] * d;
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = y.cols();
                let gx = grad_buf(grads, *x, gout.len());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let [rows, cols] = node.value.shape();
                let g = self.value(*gain).data();
                if self.ng(*gain) {
                    let gg = grad_buf(grads, *gain, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += gout[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if self.ng(*bias) {
                    let gb = grad_buf(grads, *bias, cols);
                    for chunk in gout.chunks(cols) {
                        accumulate(gb, chunk);
                    }
                }
                if self.ng(*x) {
                    let gx = grad_buf(grads, *x, rows * cols);
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let mut sum = 0.0;
                        let mut sum_xh = 0.0;
                        for c in 0..cols {
                            let d = gout[r * cols + c] * g[c];
                            dxhat[c] = d;
                            sum += d;
                            sum_xh += d * xhat[r * cols + c];
                        }
                        let inv = inv_std[r];
                        for c in 0..cols {
                            gx[r * cols + c] +=
                                inv / n * (n * dxhat[c] - sum - xhat[r * cols + c] * sum_xh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let cols = self.value(*table).cols();
                let n = self.value(*table).len();
                let gt = grad_buf(grads, *table, n);
                for (i, &id) in ids.iter().enumerate() {
                    accumulate(
                        &mut gt[id * cols..(id + 1) * cols],
                        &gout[i * cols..(i + 1) * cols],
                    );
                }
            }
            Op::Nll {
                probs,
                targets,
                mask,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let p = self.value(*probs);
                let cols = p.cols();
                let gp = grad_buf(grads, *probs, p.len());
                let scale = gout[0] / *count as f64;
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if m {
                        gp[r * cols + t] -= scale / p.get(r, t);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.backprop_attention(*q, *k, *v, *layout, probs, gout, grads),
            Op::Dropout { x, keep } => {
                let gx = grad_buf(grads, *x, gout.len());
                for i in 0..gout.len() {
                    gx[i] += gout[i] * keep[i];
                }
            }
            Op::SelectRows { x, rows } => {
                let cols = self.value(*x).cols();
                let n = self.value(*x).len();
                let gx = grad_buf(grads, *x, n);
                for (i, &r) in rows.iter().enumerate() {
                    accumulate(
                        &mut gx[r * cols..(r + 1) * cols],
                        &gout[i * cols..(i + 1) * cols],
                    );
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: &[f64],
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttnLayout {
            batch,
            q_len,
            k_len,
            heads,
        } = layout;
        let d = self.value(q).cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let block = q_len * k_len;
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        // Local buffers: q, k and v may alias the same node.
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; block];
        for b in 0..batch {
            for h in 0..heads {
                let q_off = b * q_len * d + h * dh;
                let k_off = b * k_len * d + h * dh;
                let p = &probs[(b * heads + h) * block..(b * heads + h + 1) * block];
                // dP = dO * V^T
                gemm(
                    q_len,
                    dh,
                    k_len,
                    MatRef::row_major(gout, q_off, d),
                    MatRef::transposed(vd, k_off, d),
                    0.0,
                    &mut dp,
                    0,
                    k_len,
                );
                // dV += P^T * dO
                gemm(
                    k_len,
                    q_len,
                    dh,
                    MatRef::transposed(p, 0, k_len),
                    MatRef::row_major(gout, q_off, d),
                    1.0,
                    &mut dv,
                    k_off,
                    d,
                );
                // dS = P * (dP - rowsum(dP * P)) * scale, stored in dp
                for i in 0..q_len {
                    let pr = &p[i * k_len..(i + 1) * k_len];
                    let dr = &mut dp[i * k_len..(i + 1) * k_len];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..k_len {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                // dQ += dS * K
                gemm(
                    q_len,
                    k_len,
                    dh,
                    MatRef::row_major(&dp, 0, k_len),
                    MatRef::row_major(kd, k_off, d),
                    1.0,
                    &mut dq,
                    q_off,
                    d,
                );
                // dK += dS^T * Q
                gemm(
                    k_len,
                    q_len,
                    dh,
                    MatRef::transposed(&dp, 0, k_len),
                    MatRef::row_major(qd, q_off, d),
                    1.0,
                    &mut dk,
                    k_off,
                    d,
                );
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if self.ng(var) {
                accumulate(grad_buf(grads, var, local.len()), &local);
            }
        }
    }
}

/// Softmax of `row` restricted to columns where `keep` holds, written into
/// `out`; dropped columns are set to zero. Fails when nothing is kept.
fn softmax_row(row: &[f64], keep: impl Fn(usize) -> bool, out: &mut [f64]) -> std::result::Result<(), ()> {
    let mut max = f64::NEG_INFINITY;
    for (c, &v) in row.iter().enumerate() {
        if keep(c) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut total = 0.0;
    for (c, &v) in row.iter().enumerate() {
        let e = if keep(c) { (v - max).exp() } else { 0.0 };
        out[c] = e;
        total += e;
    }
    out.iter_mut().for_each(|v| *v /= total);
    Ok(())
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_by_hand() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p), g.value(m));

        let a = g.constant(t(&[vec![1.0, 2.0]]));
        let b = g.constant(t(&[vec![3.0], vec![4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_contract_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        assert!(matches!(g.matmul(a, b), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[vec![0.0, 0.0], vec![1.0, 2.0]]));
        let s = g.softmax(x, None).unwrap();
        assert_eq!(g.value(s).row(0), &[0.5, 0.5]);

        let x = g.constant(t(&[vec![1.0, 2.0, 3.0]]));
        let s = g.softmax(x, None).unwrap();
        // exp-normalize evaluated independently at high precision
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        for (a, b) in g.value(s).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_is_shift_invariant_and_masks_to_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[vec![0.3, -1.2, 2.5]]));
        let y = g.constant(t(&[vec![100.3, 98.8, 102.5]]));
        let sx = g.softmax(x, None).unwrap();
        let sy = g.softmax(y, None).unwrap();
        assert!(g.value(sx).max_abs_diff(g.value(sy)) < 1e-12);

        let mask = [true, false, true];
        let sm = g.softmax(x, Some(&mask)).unwrap();
        assert_eq!(g.value(sm).get(0, 1), 0.0);
        assert!((g.value(sm).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_softmax_row_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(t(&[vec![1.0, 2.0]]));
        assert!(g.softmax(x, Some(&[false, false])).is_err());
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[vec![3.0; 5]]));
        let gain = g.constant(Tensor::filled(1, 5, 1.0));
        let bias = g.constant(Tensor::zeros(1, 5));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nll_values_and_masking() {
        let mut g = Graph::new();
        let third = 1.0 / 3.0;
        let p = g.constant(t(&[vec![third; 3], vec![third; 3]]));
        let l = g.nll(p, &[0, 2], &[true, true]).unwrap();
        assert!((g.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);

        let onehot = g.constant(t(&[vec![0.0, 1.0, 0.0]]));
        let l = g.nll(onehot, &[1], &[true]).unwrap();
        assert!(g.value(l).data()[0] <= 1e-9);

        let a = g.constant(t(&[vec![0.2, 0.8], vec![0.5, 0.5]]));
        let b = g.constant(t(&[vec![0.2, 0.8], vec![0.9, 0.1]]));
        let la = g.nll(a, &[1, 0], &[true, false]).unwrap();
        let lb = g.nll(b, &[1, 1], &[true, false]).unwrap();
        assert_eq!(g.value(la).data(), g.value(lb).data());

        assert!(g.nll(a, &[2, 0], &[true, true]).is_err());
    }

    #[test]
    fn shared_leaf_accumulates_gradients() {
        // f(x) = sum(x * x) + sum(3x) uses x at three sites: df/dx = 2x + 3
        let mut g = Graph::new();
        let x = g.param(t(&[vec![1.0, -2.0, 0.5]]));
        let xx = g.mul(x, x).unwrap();
        let s1 = g.sum(xx);
        let x3 = g.scale(x, 3.0);
        let s2 = g.sum(x3);
        let f = g.add(s1, s2).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, -1.0, 4.0]);
    }

    #[test]
    fn attention_rows_sum_to_one_and_skip_masked_keys() {
        let mut g = Graph::new();
        let layout = AttnLayout {
            batch: 1,
            q_len: 2,
            k_len: 3,
            heads: 2,
        };
        let q = g.constant(t(&[vec![0.1, 0.2, 0.3, 0.4], vec![-0.5, 0.6, 0.7, -0.8]]));
        let kv = g.constant(t(&[
            vec![1.0, 0.0, 0.5, 0.2],
            vec![0.0, 1.0, -0.3, 0.9],
            vec![0.4, 0.4, 0.4, 0.4],
        ]));
        let out = g.attention(q, kv, kv, layout, &[true, true, false]).unwrap();
        let (w, _) = g.attention_weights(out).unwrap();
        for row in w.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert_eq!(row[2], 0.0);
        }
    }
}
