//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The tape records every operation of a forward computation; `backward`
//! replays it in reverse, accumulating gradients in f32 with f64 inner
//! reductions (matmul and row statistics). One training step owns one
//! tape; values are shared via `Arc` so parameters are never copied when
//! they enter a tape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{log_sum_exp, rms_norm_row, rope_apply_mode, sigmoid, silu, softmax_inplace};
use crate::tensor::{matmul_nt_kernel, matmul_tn_kernel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var, Var),
    Silu(Var),
    RmsNorm { x: Var, w: Var, eps: f32 },
    Softmax(Var),
    CausalSoftmax(Var),
    Rope { x: Var, n_heads: usize, start_pos: usize, period: Option<usize>, theta: f32 },
    GatherRows { table: Var, ids: Vec<usize> },
    SelectRows { x: Var, ids: Vec<usize> },
    ConcatRows(Var, Var),
    ConcatRowsMany(Vec<Var>),
    ConcatCols(Var, Var),
    SliceCols { x: Var, lo: usize, hi: usize },
    CrossEntropyMean { logits: Var, labels: Vec<usize> },
    MseMean { pred: Var, target: Arc<Tensor> },
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
    /// True when a parameter is reachable through this node.
    needs_grad: bool,
    param: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by tape variable; parameters not reached by the loss
/// report a zero gradient of the right shape.
pub struct Gradients<'t> {
    tape: &'t Tape,
    grads: Vec<Option<Tensor>>,
}

impl<'t> Gradients<'t> {
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn grad_or_zero(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.tape.nodes[v.0].value.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, param: bool) -> Var {
        self.nodes.push(Node { op, value: Arc::new(value), needs_grad, param });
        Var(self.nodes.len() - 1)
    }

    fn push_shared(&mut self, op: Op, value: Arc<Tensor>, needs_grad: bool, param: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad, param });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false, false)
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.push_shared(Op::Leaf, t, false, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true, true)
    }

    pub fn param_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.push_shared(Op::Leaf, t, true, true)
    }

    // ── primitives ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Matmul(a, b), v, ng, false))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(Op::Transpose(a), v, ng, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Add(a, b), v, ng, false))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Sub(a, b), v, ng, false))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Mul(a, b), v, ng, false))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let v = self.value(a).scale(c)?;
        let ng = self.ng(a);
        Ok(self.push(Op::Scale(a, c), v, ng, false))
    }

    /// Broadcast-add a scalar node (shape [1]) to every element.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Dimension("add_scalar needs a shape-[1] scalar".into()));
        }
        let sv = self.value(s).data()[0];
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|&x| x + sv).collect(),
        )?;
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(Op::AddScalar(a, s), v, ng, false))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = Tensor::from_raw(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|&x| silu(x)).collect(),
        );
        let ng = self.ng(a);
        self.push(Op::Silu(a), v, ng, false)
    }

    /// Row-wise RMS normalization with a learned gain vector.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f32) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.rank() != 2 || wv.numel() != xv.cols() {
            return Err(Error::Dimension("rms_norm expects [n x d] and gain [d]".into()));
        }
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = vec![0.0f32; n * d];
        for i in 0..n {
            rms_norm_row(xv.row(i), wv.data(), eps, &mut out[i * d..(i + 1) * d]);
        }
        let v = Tensor::from_raw(vec![n, d], out);
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(Op::RmsNorm { x, w, eps }, v, ng, false))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::Dimension("softmax expects a matrix".into()));
        }
        let (n, d) = (av.rows(), av.cols());
        let mut out = av.data().to_vec();
        for i in 0..n {
            softmax_inplace(&mut out[i * d..(i + 1) * d]);
        }
        let v = Tensor::from_raw(vec![n, d], out);
        let ng = self.ng(a);
        Ok(self.push(Op::Softmax(a), v, ng, false))
    }

    /// Softmax over row prefixes: row i normalizes entries 0..=i, the rest
    /// are zero. Scores must be square [L x L].
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || av.rows() != av.cols() {
            return Err(Error::Dimension("causal_softmax expects square scores".into()));
        }
        let l = av.rows();
        let mut out = vec![0.0f32; l * l];
        for i in 0..l {
            let row = &mut out[i * l..i * l + i + 1];
            row.copy_from_slice(&av.row(i)[..=i]);
            softmax_inplace(row);
        }
        let v = Tensor::from_raw(vec![l, l], out);
        let ng = self.ng(a);
        Ok(self.push(Op::CausalSoftmax(a), v, ng, false))
    }

    pub fn rope(&mut self, x: Var, n_heads: usize, start_pos: usize, theta: f32) -> Result<Var> {
        self.rope_inner(x, n_heads, start_pos, None, theta)
    }

    /// Rope over stacked equal-length sequences: position resets every
    /// `seq_len` rows.
    pub fn rope_periodic(&mut self, x: Var, n_heads: usize, seq_len: usize, theta: f32) -> Result<Var> {
        if seq_len == 0 {
            return Err(Error::Dimension("rope_periodic needs a positive sequence length".into()));
        }
        self.rope_inner(x, n_heads, 0, Some(seq_len), theta)
    }

    fn rope_inner(
        &mut self,
        x: Var,
        n_heads: usize,
        start_pos: usize,
        period: Option<usize>,
        theta: f32,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.cols() % n_heads != 0 || (xv.cols() / n_heads) % 2 != 0 {
            return Err(Error::Dimension("rope expects [L x d] with even head dim".into()));
        }
        let (l, d) = (xv.rows(), xv.cols());
        let mut out = xv.data().to_vec();
        rope_apply_mode(&mut out, l, d, n_heads, start_pos, period, theta, false);
        let v = Tensor::from_raw(vec![l, d], out);
        let ng = self.ng(x);
        Ok(self.push(Op::Rope { x, n_heads, start_pos, period, theta }, v, ng, false))
    }

    /// Stack several matrices with equal column counts, top to bottom.
    pub fn concat_rows_many(&mut self, parts: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = parts.split_first() else {
            return Err(Error::Dimension("concat_rows_many needs at least one part".into()));
        };
        let cols = self.value(first).cols();
        let mut rows = self.value(first).rows();
        for &p in rest {
            if self.value(p).cols() != cols {
                return Err(Error::Dimension("concat_rows_many column mismatch".into()));
            }
            rows += self.value(p).rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let v = Tensor::from_raw(vec![rows, cols], data);
        Ok(self.push(Op::ConcatRowsMany(parts.to_vec()), v, ng, false))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::Dimension("gather_rows expects a matrix table".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::Dimension(format!("row id {bad} out of range {}", tv.rows())));
        }
        let d = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let v = Tensor::from_raw(vec![ids.len(), d], out);
        let ng = self.ng(table);
        Ok(self.push(Op::GatherRows { table, ids: ids.to_vec() }, v, ng, false))
    }

    pub fn select_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::Dimension("select_rows expects a matrix".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::Dimension(format!("row id {bad} out of range {}", xv.rows())));
        }
        let d = xv.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(xv.row(i));
        }
        let v = Tensor::from_raw(vec![ids.len(), d], out);
        let ng = self.ng(x);
        Ok(self.push(Op::SelectRows { x, ids: ids.to_vec() }, v, ng, false))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::Dimension("concat_rows column mismatch".into()));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let v = Tensor::from_raw(vec![av.rows() + bv.rows(), av.cols()], data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::ConcatRows(a, b), v, ng, false))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat_cols(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::ConcatCols(a, b), v, ng, false))
    }

    pub fn slice_cols(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || hi > xv.cols() || lo >= hi {
            return Err(Error::Dimension(format!(
                "slice_cols {lo}..{hi} out of range for {:?}",
                xv.shape()
            )));
        }
        let (n, d) = (xv.rows(), xv.cols());
        let w = hi - lo;
        let mut out = Vec::with_capacity(n * w);
        for i in 0..n {
            out.extend_from_slice(&xv.data()[i * d + lo..i * d + hi]);
        }
        let v = Tensor::from_raw(vec![n, w], out);
        let ng = self.ng(x);
        Ok(self.push(Op::SliceCols { x, lo, hi }, v, ng, false))
    }

    /// Mean cross-entropy of `logits[i]` against `labels[i]`, log-sum-exp
    /// stabilized. Returns a scalar node.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != labels.len() {
            return Err(Error::Dimension("cross_entropy_mean label count mismatch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= lv.cols()) {
            return Err(Error::Dimension(format!("label {bad} out of vocab {}", lv.cols())));
        }
        let mut total = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = lv.row(i);
            total += log_sum_exp(row) - row[label] as f64;
        }
        let v = Tensor::scalar((total / labels.len() as f64) as f32);
        let ng = self.ng(logits);
        Ok(self.push(Op::CrossEntropyMean { logits, labels: labels.to_vec() }, v, ng, false))
    }

    /// Mean squared error against a constant target. Returns a scalar node.
    pub fn mse_mean(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::Dimension("mse_mean shape mismatch".into()));
        }
        let n = pv.numel() as f64;
        let total: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| ((p - t) as f64).powi(2))
            .sum();
        let v = Tensor::scalar((total / n) as f32);
        let ng = self.ng(pred);
        Ok(self.push(
            Op::MseMean { pred, target: Arc::new(target.clone()) },
            v,
            ng,
            false,
        ))
    }

    // ── backward ──────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<'_>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] =
            Some(Tensor::from_raw(self.value(loss).shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                if node.param {
                    grads[idx] = Some(g);
                }
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        // dA = G . B^T
                        let (m, n) = (g.rows(), g.cols());
                        let k = av.cols();
                        let mut da = vec![0.0f32; m * k];
                        matmul_nt_kernel(g.data(), bv.data(), m, n, k, &mut da);
                        accumulate(&mut grads[a.0], Tensor::from_raw(vec![m, k], da));
                    }
                    if self.ng(*b) {
                        // dB = A^T . G
                        let (m, k) = (av.rows(), av.cols());
                        let n = g.cols();
                        let mut db = vec![0.0f32; k * n];
                        matmul_tn_kernel(av.data(), g.data(), m, k, n, &mut db);
                        accumulate(&mut grads[b.0], Tensor::from_raw(vec![k, n], db));
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads[a.0], g.transpose());
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], neg(&g));
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], hadamard_raw(&g, self.value(*b)));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], hadamard_raw(&g, self.value(*a)));
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads[a.0], scale_raw(&g, *c));
                }
                Op::AddScalar(a, s) => {
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.ng(*s) {
                        let total: f64 = g.data().iter().map(|&v| v as f64).sum();
                        accumulate(&mut grads[s.0], Tensor::scalar(total as f32));
                    }
                }
                Op::Silu(a) => {
                    let xv = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gi, &x)| {
                            let s = sigmoid(x);
                            gi * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::from_raw(xv.shape().to_vec(), data));
                }
                Op::RmsNorm { x, w, eps } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, d) = (xv.rows(), xv.cols());
                    let mut dx = vec![0.0f32; n * d];
                    let mut dw = vec![0.0f64; d];
                    for i in 0..n {
                        let xr = xv.row(i);
                        let gr = g.row(i);
                        let ms: f64 =
                            xr.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d as f64;
                        let r = (ms + *eps as f64).sqrt();
                        // dot of (g .* w) with x
                        let gwx: f64 = gr
                            .iter()
                            .zip(wv.data())
                            .zip(xr)
                            .map(|((&gi, &wi), &xi)| gi as f64 * wi as f64 * xi as f64)
                            .sum();
                        for j in 0..d {
                            let gw = gr[j] as f64 * wv.data()[j] as f64;
                            dx[i * d + j] =
                                (gw / r - xr[j] as f64 * gwx / (d as f64 * r * r * r)) as f32;
                            dw[j] += gr[j] as f64 * xr[j] as f64 / r;
                        }
                    }
                    if self.ng(*x) {
                        accumulate(&mut grads[x.0], Tensor::from_raw(vec![n, d], dx));
                    }
                    if self.ng(*w) {
                        accumulate(
                            &mut grads[w.0],
                            Tensor::from_raw(vec![d], dw.iter().map(|&v| v as f32).collect()),
                        );
                    }
                }
                Op::Softmax(a) => {
                    let yv = &self.nodes[idx].value;
                    let (n, d) = (yv.rows(), yv.cols());
                    let mut dx = vec![0.0f32; n * d];
                    for i in 0..n {
                        softmax_backward_row(yv.row(i), g.row(i), &mut dx[i * d..(i + 1) * d]);
                    }
                    accumulate(&mut grads[a.0], Tensor::from_raw(vec![n, d], dx));
                }
                Op::CausalSoftmax(a) => {
                    let yv = &self.nodes[idx].value;
                    let l = yv.rows();
                    let mut dx = vec![0.0f32; l * l];
                    for i in 0..l {
                        softmax_backward_row(
                            &yv.row(i)[..=i],
                            &g.row(i)[..=i],
                            &mut dx[i * l..i * l + i + 1],
                        );
                    }
                    accumulate(&mut grads[a.0], Tensor::from_raw(vec![l, l], dx));
                }
                Op::Rope { x, n_heads, start_pos, period, theta } => {
                    let xv = self.value(*x);
                    let (l, d) = (xv.rows(), xv.cols());
                    let mut dx = g.data().to_vec();
                    rope_apply_mode(&mut dx, l, d, *n_heads, *start_pos, *period, *theta, true);
                    accumulate(&mut grads[x.0], Tensor::from_raw(vec![l, d], dx));
                }
                Op::ConcatRowsMany(parts) => {
                    let mut row0 = 0usize;
                    for &p in parts {
                        let (r, c) = (self.value(p).rows(), self.value(p).cols());
                        if self.ng(p) {
                            let dp = g.data()[row0 * c..(row0 + r) * c].to_vec();
                            accumulate(&mut grads[p.0], Tensor::from_raw(vec![r, c], dp));
                        }
                        row0 += r;
                    }
                }
                Op::GatherRows { table, ids } => {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let mut dt = vec![0.0f32; tv.rows() * d];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g.data()[row * d + j];
                        }
                    }
                    accumulate(&mut grads[table.0], Tensor::from_raw(vec![tv.rows(), d], dt));
                }
                Op::SelectRows { x, ids } => {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut dx = vec![0.0f32; xv.rows() * d];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dx[id * d + j] += g.data()[row * d + j];
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_raw(vec![xv.rows(), d], dx));
                }
                Op::ConcatRows(a, b) => {
                    let (ar, c) = (self.value(*a).rows(), self.value(*a).cols());
                    if self.ng(*a) {
                        let da = g.data()[..ar * c].to_vec();
                        accumulate(&mut grads[a.0], Tensor::from_raw(vec![ar, c], da));
                    }
                    if self.ng(*b) {
                        let br = self.value(*b).rows();
                        let db = g.data()[ar * c..].to_vec();
                        accumulate(&mut grads[b.0], Tensor::from_raw(vec![br, c], db));
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (n, ca) = (self.value(*a).rows(), self.value(*a).cols());
                    let cb = self.value(*b).cols();
                    if self.ng(*a) {
                        let mut da = Vec::with_capacity(n * ca);
                        for i in 0..n {
                            da.extend_from_slice(&g.row(i)[..ca]);
                        }
                        accumulate(&mut grads[a.0], Tensor::from_raw(vec![n, ca], da));
                    }
                    if self.ng(*b) {
                        let mut db = Vec::with_capacity(n * cb);
                        for i in 0..n {
                            db.extend_from_slice(&g.row(i)[ca..]);
                        }
                        accumulate(&mut grads[b.0], Tensor::from_raw(vec![n, cb], db));
                    }
                }
                Op::SliceCols { x, lo, hi } => {
                    let xv = self.value(*x);
                    let (n, d) = (xv.rows(), xv.cols());
                    let w = hi - lo;
                    let mut dx = vec![0.0f32; n * d];
                    for i in 0..n {
                        dx[i * d + lo..i * d + hi].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    accumulate(&mut grads[x.0], Tensor::from_raw(vec![n, d], dx));
                }
                Op::CrossEntropyMean { logits, labels } => {
                    let lv = self.value(*logits);
                    let (n, vsz) = (lv.rows(), lv.cols());
                    let gscale = g.data()[0] / n as f32;
                    let mut dl = vec![0.0f32; n * vsz];
                    for (i, &label) in labels.iter().enumerate() {
                        let row = lv.row(i);
                        let out = &mut dl[i * vsz..(i + 1) * vsz];
                        out.copy_from_slice(row);
                        softmax_inplace(out);
                        out[label] -= 1.0;
                        out.iter_mut().for_each(|v| *v *= gscale);
                    }
                    accumulate(&mut grads[logits.0], Tensor::from_raw(vec![n, vsz], dl));
                }
                Op::MseMean { pred, target } => {
                    let pv = self.value(*pred);
                    let scale = 2.0 * g.data()[0] / pv.numel() as f32;
                    let data = pv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| scale * (p - t))
                        .collect();
                    accumulate(&mut grads[pred.0], Tensor::from_raw(pv.shape().to_vec(), data));
                }
            }
            if node.param {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { tape: self, grads })
    }
}

fn softmax_backward_row(y: &[f32], g: &[f32], out: &mut [f32]) {
    let dot: f64 = y.iter().zip(g).map(|(&yi, &gi)| yi as f64 * gi as f64).sum();
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o = (yi as f64 * (gi as f64 - dot)) as f32;
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        None => *slot = Some(delta),
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
    }
}

fn neg(t: &Tensor) -> Tensor {
    Tensor::from_raw(t.shape().to_vec(), t.data().iter().map(|&v| -v).collect())
}

fn hadamard_raw(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_raw(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
    )
}

fn scale_raw(t: &Tensor, c: f32) -> Tensor {
    Tensor::from_raw(t.shape().to_vec(), t.data().iter().map(|&v| v * c).collect())
}

// ── Adam ────────────────────────────────────────────────────────────────

/// Adam with bias correction; the only optimizer in the crate.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, param_sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update over parallel slices of parameters and gradients.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) {
        self.step_with_lr(params, grads, self.lr);
    }

    pub fn step_with_lr(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]], lr: f32) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / b1t;
                let vhat = v[i] / b2t;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
