//! Reverse-mode tape over [`Tensor`]. Ops push nodes in topological order;
//! `backward` walks them in reverse. Besides the usual dense ops there are
//! three fused ones: the relation score bias, the relation value mix, and
//! the per-position context attention head.

#![allow(clippy::needless_range_loop)] // indexed loops mirror the math

use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-pair relation bias index (`None` for untyped pairs).
#[derive(Debug, Clone)]
pub struct RelGrid {
    pub n: usize,
    idx: Vec<Option<u8>>,
}

impl RelGrid {
    pub fn none(n: usize) -> Self {
        RelGrid {
            n,
            idx: vec![None; n * n],
        }
    }

    pub fn set(&mut self, i: usize, j: usize, t: Option<u8>) {
        self.idx[i * self.n + j] = t;
    }

    pub fn get(&self, i: usize, j: usize) -> Option<u8> {
        self.idx[i * self.n + j]
    }
}

/// Frozen context rows for one table word: `r` rows of width `d`, with a
/// validity mask; invalid rows are zero and excluded from attention.
#[derive(Debug, Clone)]
pub struct StackData {
    pub rows: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Context stacks bound to the positions of one window.
#[derive(Debug, Clone)]
pub struct ContextBundle {
    pub r: usize,
    pub d: usize,
    /// Stack index for each input position, `None` outside table cells.
    pub per_pos: Vec<Option<usize>>,
    pub stacks: Vec<StackData>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    /// `a · b^T`
    MatmulBT(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SoftmaxMaskedRows {
        x: Var,
        mask: Rc<Vec<bool>>,
    },
    ColSlice {
        x: Var,
        start: usize,
        width: usize,
    },
    ConcatCols(Vec<Var>),
    Embedding {
        table: Var,
        ids: Rc<Vec<usize>>,
    },
    SelectRows {
        x: Var,
        rows: Rc<Vec<usize>>,
    },
    Transpose(Var),
    RelScoreBias {
        q: Var,
        bias: Var,
        grid: Rc<RelGrid>,
    },
    RelValueMix {
        alpha: Var,
        bias: Var,
        grid: Rc<RelGrid>,
    },
    ContextHeads {
        x: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        bundle: Rc<ContextBundle>,
    },
    CrossEntropy {
        logits: Var,
        targets: Rc<Vec<usize>>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    poisoned: Option<String>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            poisoned: None,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First op that produced a non-finite value, if any.
    pub fn check_finite(&self) -> Result<()> {
        match &self.poisoned {
            Some(op) => Err(Error::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Var {
        if self.poisoned.is_none() && !value.is_finite() {
            self.poisoned = Some(name.to_string());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        let rg = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), rg, "add")
    }

    /// `[n, d] + [d]`, broadcasting the bias over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        assert_eq!(ta.cols(), tb.numel(), "bias width mismatch");
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % cols])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        let rg = self.needs(a) || self.needs(bias);
        self.push(value, Op::AddRowBias(a, bias), rg, "add_row_bias")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect());
        let rg = self.needs(a);
        self.push(value, Op::Scale(a, c), rg, "scale")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, m, p) = (ta.rows(), ta.cols(), tb.cols());
        assert_eq!(m, tb.rows(), "matmul inner dim mismatch");
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let arow = ta.row(i);
            for (kk, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = tb.row(kk);
                let orow = &mut out[i * p..(i + 1) * p];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::new(vec![n, p], out);
        let rg = self.needs(a) || self.needs(b);
        self.push(value, Op::Matmul(a, b), rg, "matmul")
    }

    /// `a · b^T` for `a: [n, m]`, `b: [p, m]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, m, p) = (ta.rows(), ta.cols(), tb.rows());
        assert_eq!(m, tb.cols(), "matmul_bt inner dim mismatch");
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let arow = ta.row(i);
            for j in 0..p {
                out[i * p + j] = dot(arow, tb.row(j));
            }
        }
        let value = Tensor::new(vec![n, p], out);
        let rg = self.needs(a) || self.needs(b);
        self.push(value, Op::MatmulBT(a, b), rg, "matmul_bt")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        let rg = self.needs(a);
        self.push(value, Op::Gelu(a), rg, "gelu")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let tx = &self.nodes[x.0].value;
        let (n, d) = (tx.rows(), tx.cols());
        assert_eq!(self.nodes[gamma.0].value.numel(), d);
        assert_eq!(self.nodes[beta.0].value.numel(), d);
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        {
            let g = self.nodes[gamma.0].value.data();
            let b = self.nodes[beta.0].value.data();
            for i in 0..n {
                let row = tx.row(i);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[i] = istd;
                for j in 0..d {
                    let h = (row[j] - mean) * istd;
                    xhat[i * d + j] = h;
                    out[i * d + j] = g[j] * h + b[j];
                }
            }
        }
        let value = Tensor::new(vec![n, d], out);
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::new(vec![n, d], xhat),
                inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    /// Row softmax over unmasked key columns; masked columns are exactly 0.
    pub fn softmax_masked_rows(&mut self, x: Var, mask: Rc<Vec<bool>>) -> Var {
        let tx = &self.nodes[x.0].value;
        let (n, m) = (tx.rows(), tx.cols());
        assert_eq!(mask.len(), m, "mask width mismatch");
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = tx.row(i);
            let mut maxv = f64::NEG_INFINITY;
            for j in 0..m {
                if mask[j] {
                    maxv = maxv.max(row[j]);
                }
            }
            if maxv == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut denom = 0.0;
            for j in 0..m {
                if mask[j] {
                    let e = (row[j] - maxv).exp();
                    out[i * m + j] = e;
                    denom += e;
                }
            }
            for j in 0..m {
                out[i * m + j] /= denom;
            }
        }
        let value = Tensor::new(vec![n, m], out);
        let rg = self.needs(x);
        self.push(value, Op::SoftmaxMaskedRows { x, mask }, rg, "softmax")
    }

    pub fn col_slice(&mut self, x: Var, start: usize, width: usize) -> Var {
        let tx = &self.nodes[x.0].value;
        let (n, d) = (tx.rows(), tx.cols());
        assert!(start + width <= d, "slice out of range");
        let mut out = Vec::with_capacity(n * width);
        for i in 0..n {
            out.extend_from_slice(&tx.row(i)[start..start + width]);
        }
        let value = Tensor::new(vec![n, width], out);
        let rg = self.needs(x);
        self.push(value, Op::ColSlice { x, start, width }, rg, "col_slice")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|v| self.nodes[v.0].value.cols()).sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let value = Tensor::new(vec![n, total], out);
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn embedding(&mut self, table: Var, ids: Rc<Vec<usize>>) -> Var {
        let tt = &self.nodes[table.0].value;
        let d = tt.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids.iter() {
            out.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out);
        let rg = self.needs(table);
        self.push(value, Op::Embedding { table, ids }, rg, "embedding")
    }

    pub fn select_rows(&mut self, x: Var, rows: Rc<Vec<usize>>) -> Var {
        let tx = &self.nodes[x.0].value;
        let d = tx.cols();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows.iter() {
            out.extend_from_slice(tx.row(r));
        }
        let value = Tensor::new(vec![rows.len(), d], out);
        let rg = self.needs(x);
        self.push(value, Op::SelectRows { x, rows }, rg, "select_rows")
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let (n, m) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = tx.at(i, j);
            }
        }
        let value = Tensor::new(vec![m, n], out);
        let rg = self.needs(x);
        self.push(value, Op::Transpose(x), rg, "transpose")
    }

    /// `out[i][j] = q_i . bias[t(i,j)]`, zero where the grid has no type.
    pub fn rel_score_bias(&mut self, q: Var, bias: Var, grid: Rc<RelGrid>) -> Var {
        let (tq, tb) = (&self.nodes[q.0].value, &self.nodes[bias.0].value);
        let (n, k) = (tq.rows(), tq.cols());
        assert_eq!(grid.n, n, "relation grid size mismatch");
        assert_eq!(tb.cols(), k, "relation bias width mismatch");
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let qrow = tq.row(i);
            for j in 0..n {
                if let Some(t) = grid.get(i, j) {
                    out[i * n + j] = dot(qrow, tb.row(t as usize));
                }
            }
        }
        let value = Tensor::new(vec![n, n], out);
        let rg = self.needs(q) || self.needs(bias);
        self.push(value, Op::RelScoreBias { q, bias, grid }, rg, "rel_score_bias")
    }

    /// `out[i] = sum_j alpha[i][j] * bias[t(i,j)]`, skipping untyped pairs.
    pub fn rel_value_mix(&mut self, alpha: Var, bias: Var, grid: Rc<RelGrid>) -> Var {
        let (ta, tb) = (&self.nodes[alpha.0].value, &self.nodes[bias.0].value);
        let n = ta.rows();
        let k = tb.cols();
        assert_eq!(ta.cols(), n, "alpha must be square");
        assert_eq!(grid.n, n, "relation grid size mismatch");
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let arow = ta.row(i);
            for j in 0..n {
                if let Some(t) = grid.get(i, j) {
                    let a = arow[j];
                    if a != 0.0 {
                        let brow = tb.row(t as usize);
                        let orow = &mut out[i * k..(i + 1) * k];
                        for (o, &b) in orow.iter_mut().zip(brow) {
                            *o += a * b;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, k], out);
        let rg = self.needs(alpha) || self.needs(bias);
        self.push(value, Op::RelValueMix { alpha, bias, grid }, rg, "rel_value_mix")
    }

    /// The text-aware head: each position attends over its own frozen
    /// context rows. Positions without a stack (or with all rows invalid)
    /// emit a zero vector.
    pub fn context_heads(&mut self, x: Var, wq: Var, wk: Var, wv: Var, bundle: Rc<ContextBundle>) -> Var {
        let k = self.nodes[wq.0].value.cols();
        let n = self.nodes[x.0].value.rows();
        assert_eq!(bundle.per_pos.len(), n, "bundle does not cover the window");
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            if let Some(ctx) = context_forward_at(self, x, wq, wk, wv, &bundle, i) {
                out[i * k..(i + 1) * k].copy_from_slice(&ctx.out);
            }
        }
        let value = Tensor::new(vec![n, k], out);
        let rg = self.needs(x) || self.needs(wq) || self.needs(wk) || self.needs(wv);
        self.push(value, Op::ContextHeads { x, wq, wk, wv, bundle }, rg, "context_heads")
    }

    /// Mean cross-entropy over rows, from raw logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Vec<usize>>) -> Var {
        let tl = &self.nodes[logits.0].value;
        let (n, v) = (tl.rows(), tl.cols());
        assert_eq!(targets.len(), n, "one target per row");
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for i in 0..n {
            let row = tl.row(i);
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..v {
                let e = (row[j] - maxv).exp();
                probs[i * v + j] = e;
                denom += e;
            }
            for j in 0..v {
                probs[i * v + j] /= denom;
            }
            loss += denom.ln() + maxv - row[targets[i]];
        }
        loss /= n as f64;
        let value = Tensor::scalar(loss);
        let rg = self.needs(logits);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets,
                probs: Tensor::new(vec![n, v], probs),
            },
            rg,
            "cross_entropy",
        )
    }

    /// Reverse pass from a scalar loss. Returns one gradient slot per node;
    /// leaves that require gradients are the interesting entries.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward".into() });
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let acc = |grads: &mut Vec<Option<Tensor>>, nodes: &[Node], target: Var, add: Tensor| {
            if !nodes[target.0].requires_grad {
                return;
            }
            match &mut grads[target.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(add.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(add),
            }
        };
        let nodes = &self.nodes;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, nodes, *a, g.clone());
                acc(grads, nodes, *b, g.clone());
            }
            Op::AddRowBias(a, bias) => {
                acc(grads, nodes, *a, g.clone());
                let cols = nodes[bias.0].value.numel();
                let mut db = vec![0.0; cols];
                for (i, v) in g.data().iter().enumerate() {
                    db[i % cols] += v;
                }
                acc(grads, nodes, *bias, Tensor::new(vec![cols], db));
            }
            Op::Scale(a, c) => {
                let data = g.data().iter().map(|v| v * c).collect();
                acc(grads, nodes, *a, Tensor::new(g.shape().to_vec(), data));
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (n, m, p) = (ta.rows(), ta.cols(), tb.cols());
                if nodes[a.0].requires_grad {
                    // dA = dC . B^T
                    let mut da = vec![0.0; n * m];
                    for i in 0..n {
                        let grow = g.row(i);
                        for j in 0..m {
                            da[i * m + j] = dot(grow, tb.row(j));
                        }
                    }
                    acc(grads, nodes, *a, Tensor::new(vec![n, m], da));
                }
                if nodes[b.0].requires_grad {
                    // dB = A^T . dC
                    let mut db = vec![0.0; m * p];
                    for i in 0..n {
                        let arow = ta.row(i);
                        let grow = g.row(i);
                        for (kk, &av) in arow.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            let dbrow = &mut db[kk * p..(kk + 1) * p];
                            for (o, &gv) in dbrow.iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    acc(grads, nodes, *b, Tensor::new(vec![m, p], db));
                }
            }
            Op::MatmulBT(a, b) => {
                // C = A . B^T, A: [n, m], B: [p, m], C/g: [n, p]
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (n, m, p) = (ta.rows(), ta.cols(), tb.rows());
                if nodes[a.0].requires_grad {
                    // dA = dC . B
                    let mut da = vec![0.0; n * m];
                    for i in 0..n {
                        let grow = g.row(i);
                        for (j, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let brow = tb.row(j);
                            let darow = &mut da[i * m..(i + 1) * m];
                            for (o, &bv) in darow.iter_mut().zip(brow) {
                                *o += gv * bv;
                            }
                        }
                    }
                    acc(grads, nodes, *a, Tensor::new(vec![n, m], da));
                }
                if nodes[b.0].requires_grad {
                    // dB = dC^T . A
                    let mut db = vec![0.0; p * m];
                    for i in 0..n {
                        let arow = ta.row(i);
                        let grow = g.row(i);
                        for (j, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let dbrow = &mut db[j * m..(j + 1) * m];
                            for (o, &av) in dbrow.iter_mut().zip(arow) {
                                *o += gv * av;
                            }
                        }
                    }
                    acc(grads, nodes, *b, Tensor::new(vec![p, m], db));
                }
            }
            Op::Gelu(a) => {
                let ta = &nodes[a.0].value;
                let data = ta
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| gv * gelu_grad(x))
                    .collect();
                acc(grads, nodes, *a, Tensor::new(ta.shape().to_vec(), data));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = (xhat.rows(), xhat.cols());
                let gdat = nodes[gamma.0].value.data();
                if nodes[gamma.0].requires_grad {
                    let mut dg = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            dg[j] += g.at(i, j) * xhat.at(i, j);
                        }
                    }
                    acc(grads, nodes, *gamma, Tensor::new(vec![d], dg));
                }
                if nodes[beta.0].requires_grad {
                    let mut db = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            db[j] += g.at(i, j);
                        }
                    }
                    acc(grads, nodes, *beta, Tensor::new(vec![d], db));
                }
                if nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let mut mean_gy = 0.0;
                        let mut mean_gyx = 0.0;
                        for j in 0..d {
                            let gy = g.at(i, j) * gdat[j];
                            mean_gy += gy;
                            mean_gyx += gy * xhat.at(i, j);
                        }
                        mean_gy /= d as f64;
                        mean_gyx /= d as f64;
                        for j in 0..d {
                            let gy = g.at(i, j) * gdat[j];
                            dx[i * d + j] = (gy - mean_gy - xhat.at(i, j) * mean_gyx) * inv_std[i];
                        }
                    }
                    acc(grads, nodes, *x, Tensor::new(vec![n, d], dx));
                }
            }
            Op::SoftmaxMaskedRows { x, mask } => {
                let y = &nodes[idx].value;
                let (n, m) = (y.rows(), y.cols());
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let yrow = y.row(i);
                    let grow = g.row(i);
                    let inner: f64 = (0..m)
                        .filter(|&j| mask[j])
                        .map(|j| yrow[j] * grow[j])
                        .sum();
                    for j in 0..m {
                        if mask[j] {
                            dx[i * m + j] = yrow[j] * (grow[j] - inner);
                        }
                    }
                }
                acc(grads, nodes, *x, Tensor::new(vec![n, m], dx));
            }
            Op::ColSlice { x, start, width } => {
                let tx = &nodes[x.0].value;
                let (n, d) = (tx.rows(), tx.cols());
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..*width {
                        dx[i * d + start + j] = g.at(i, j);
                    }
                }
                acc(grads, nodes, *x, Tensor::new(vec![n, d], dx));
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    if nodes[p.0].requires_grad {
                        let mut dp = Vec::with_capacity(n * w);
                        for i in 0..n {
                            dp.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        acc(grads, nodes, p, Tensor::new(vec![n, w], dp));
                    }
                    offset += w;
                }
            }
            Op::Embedding { table, ids } => {
                let tt = &nodes[table.0].value;
                let (v, d) = (tt.rows(), tt.cols());
                let mut dt = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    let grow = g.row(i);
                    let drow = &mut dt[id * d..(id + 1) * d];
                    for (o, &gv) in drow.iter_mut().zip(grow) {
                        *o += gv;
                    }
                }
                acc(grads, nodes, *table, Tensor::new(vec![v, d], dt));
            }
            Op::SelectRows { x, rows } => {
                let tx = &nodes[x.0].value;
                let (n, d) = (tx.rows(), tx.cols());
                let mut dx = vec![0.0; n * d];
                for (i, &r) in rows.iter().enumerate() {
                    let grow = g.row(i);
                    let drow = &mut dx[r * d..(r + 1) * d];
                    for (o, &gv) in drow.iter_mut().zip(grow) {
                        *o += gv;
                    }
                }
                acc(grads, nodes, *x, Tensor::new(vec![n, d], dx));
            }
            Op::Transpose(x) => {
                let (n, m) = (g.rows(), g.cols());
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        dx[j * n + i] = g.at(i, j);
                    }
                }
                acc(grads, nodes, *x, Tensor::new(vec![m, n], dx));
            }
            Op::RelScoreBias { q, bias, grid } => {
                let (tq, tb) = (&nodes[q.0].value, &nodes[bias.0].value);
                let (n, k) = (tq.rows(), tq.cols());
                if nodes[q.0].requires_grad {
                    let mut dq = vec![0.0; n * k];
                    for i in 0..n {
                        for j in 0..n {
                            if let Some(t) = grid.get(i, j) {
                                let gv = g.at(i, j);
                                if gv == 0.0 {
                                    continue;
                                }
                                let brow = tb.row(t as usize);
                                let drow = &mut dq[i * k..(i + 1) * k];
                                for (o, &bv) in drow.iter_mut().zip(brow) {
                                    *o += gv * bv;
                                }
                            }
                        }
                    }
                    acc(grads, nodes, *q, Tensor::new(vec![n, k], dq));
                }
                if nodes[bias.0].requires_grad {
                    let nt = tb.rows();
                    let mut db = vec![0.0; nt * k];
                    for i in 0..n {
                        let qrow = tq.row(i);
                        for j in 0..n {
                            if let Some(t) = grid.get(i, j) {
                                let gv = g.at(i, j);
                                if gv == 0.0 {
                                    continue;
                                }
                                let drow = &mut db[t as usize * k..(t as usize + 1) * k];
                                for (o, &qv) in drow.iter_mut().zip(qrow) {
                                    *o += gv * qv;
                                }
                            }
                        }
                    }
                    acc(grads, nodes, *bias, Tensor::new(vec![nt, k], db));
                }
            }
            Op::RelValueMix { alpha, bias, grid } => {
                let (ta, tb) = (&nodes[alpha.0].value, &nodes[bias.0].value);
                let n = ta.rows();
                let k = tb.cols();
                if nodes[alpha.0].requires_grad {
                    let mut da = vec![0.0; n * n];
                    for i in 0..n {
                        let grow = g.row(i);
                        for j in 0..n {
                            if let Some(t) = grid.get(i, j) {
                                da[i * n + j] = dot(grow, tb.row(t as usize));
                            }
                        }
                    }
                    acc(grads, nodes, *alpha, Tensor::new(vec![n, n], da));
                }
                if nodes[bias.0].requires_grad {
                    let nt = tb.rows();
                    let mut db = vec![0.0; nt * k];
                    for i in 0..n {
                        let arow = ta.row(i);
                        let grow = g.row(i);
                        for j in 0..n {
                            if let Some(t) = grid.get(i, j) {
                                let a = arow[j];
                                if a == 0.0 {
                                    continue;
                                }
                                let drow = &mut db[t as usize * k..(t as usize + 1) * k];
                                for (o, &gv) in drow.iter_mut().zip(grow) {
                                    *o += a * gv;
                                }
                            }
                        }
                    }
                    acc(grads, nodes, *bias, Tensor::new(vec![nt, k], db));
                }
            }
            Op::ContextHeads { x, wq, wk, wv, bundle } => {
                let tx = &nodes[x.0].value;
                let twq = &nodes[wq.0].value;
                let (n, d) = (tx.rows(), tx.cols());
                let k = twq.cols();
                let mut dx = vec![0.0; n * d];
                let mut dwq = vec![0.0; d * k];
                let mut dwk = vec![0.0; d * k];
                let mut dwv = vec![0.0; d * k];
                for i in 0..n {
                    let Some(ctx) = context_forward_at(self, *x, *wq, *wk, *wv, bundle, i) else {
                        continue;
                    };
                    let gout = &g.row(i)[..k];
                    let stack = &bundle.stacks[bundle.per_pos[i].unwrap()];
                    let nv = ctx.rows.len();
                    // d vals_j = alpha_j * gout; d alpha_j = gout . vals_j
                    let mut dalpha = vec![0.0; nv];
                    for (jj, &row_idx) in ctx.rows.iter().enumerate() {
                        let val = &ctx.vals[jj * k..(jj + 1) * k];
                        dalpha[jj] = dot(gout, val);
                        let a = ctx.alpha[jj];
                        // dWv += a * e_j^T gout  (e_j is the stack row)
                        let e = &stack.rows[row_idx * bundle.d..(row_idx + 1) * bundle.d];
                        for (r, &ev) in e.iter().enumerate() {
                            let drow = &mut dwv[r * k..(r + 1) * k];
                            for (o, &gv) in drow.iter_mut().zip(gout) {
                                *o += a * ev * gv;
                            }
                        }
                    }
                    // softmax backward
                    let inner: f64 = ctx.alpha.iter().zip(&dalpha).map(|(a, da)| a * da).sum();
                    let scale = 1.0 / (k as f64).sqrt();
                    let mut dq = vec![0.0; k];
                    for (jj, &row_idx) in ctx.rows.iter().enumerate() {
                        let ds = ctx.alpha[jj] * (dalpha[jj] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let key = &ctx.keys[jj * k..(jj + 1) * k];
                        for (o, &kv) in dq.iter_mut().zip(key) {
                            *o += ds * kv;
                        }
                        // dkey_j = ds * q; dWk += e_j^T dkey_j
                        let e = &stack.rows[row_idx * bundle.d..(row_idx + 1) * bundle.d];
                        for (r, &ev) in e.iter().enumerate() {
                            let drow = &mut dwk[r * k..(r + 1) * k];
                            for (o, &qv) in drow.iter_mut().zip(&ctx.q) {
                                *o += ds * ev * qv;
                            }
                        }
                    }
                    // q = x_i . Wq
                    let xrow = tx.row(i);
                    for (r, &xv) in xrow.iter().enumerate() {
                        let drow = &mut dwq[r * k..(r + 1) * k];
                        for (o, &dqv) in drow.iter_mut().zip(&dq) {
                            *o += xv * dqv;
                        }
                    }
                    let dxrow = &mut dx[i * d..(i + 1) * d];
                    for r in 0..d {
                        dxrow[r] += dot(&dq, twq.row(r));
                    }
                }
                acc(grads, nodes, *x, Tensor::new(vec![n, d], dx));
                acc(grads, nodes, *wq, Tensor::new(vec![d, k], dwq));
                acc(grads, nodes, *wk, Tensor::new(vec![d, k], dwk));
                acc(grads, nodes, *wv, Tensor::new(vec![d, k], dwv));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (n, v) = (probs.rows(), probs.cols());
                let gl = g.data()[0] / n as f64;
                let mut dl = vec![0.0; n * v];
                for i in 0..n {
                    let prow = probs.row(i);
                    let drow = &mut dl[i * v..(i + 1) * v];
                    for (o, &p) in drow.iter_mut().zip(prow) {
                        *o = gl * p;
                    }
                    drow[targets[i]] -= gl;
                }
                acc(grads, nodes, *logits, Tensor::new(vec![n, v], dl));
            }
        }
    }
}

/// Per-position context attention pieces shared by forward and backward.
struct ContextAt {
    /// Valid row indices into the stack.
    rows: Vec<usize>,
    q: Vec<f64>,
    keys: Vec<f64>,
    vals: Vec<f64>,
    alpha: Vec<f64>,
    out: Vec<f64>,
}

fn context_forward_at(
    tape: &Tape,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    bundle: &ContextBundle,
    i: usize,
) -> Option<ContextAt> {
    let stack_idx = bundle.per_pos[i]?;
    let stack = &bundle.stacks[stack_idx];
    let rows: Vec<usize> = (0..bundle.r).filter(|&j| stack.valid[j]).collect();
    if rows.is_empty() {
        return None;
    }
    let tx = tape.value(x);
    let twq = tape.value(wq);
    let twk = tape.value(wk);
    let twv = tape.value(wv);
    let d = bundle.d;
    let k = twq.cols();
    let xrow = tx.row(i);

    let mut q = vec![0.0; k];
    for (r, &xv) in xrow.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, &w) in q.iter_mut().zip(twq.row(r)) {
            *o += xv * w;
        }
    }
    let nv = rows.len();
    let mut keys = vec![0.0; nv * k];
    let mut vals = vec![0.0; nv * k];
    for (jj, &row_idx) in rows.iter().enumerate() {
        let e = &stack.rows[row_idx * d..(row_idx + 1) * d];
        for (r, &ev) in e.iter().enumerate() {
            if ev == 0.0 {
                continue;
            }
            let krow = twk.row(r);
            let vrow = twv.row(r);
            let kslice = &mut keys[jj * k..(jj + 1) * k];
            let vslice = &mut vals[jj * k..(jj + 1) * k];
            for c in 0..k {
                kslice[c] += ev * krow[c];
                vslice[c] += ev * vrow[c];
            }
        }
    }
    let scale = 1.0 / (k as f64).sqrt();
    let scores: Vec<f64> = (0..nv)
        .map(|jj| dot(&q, &keys[jj * k..(jj + 1) * k]) * scale)
        .collect();
    let maxv = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - maxv).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let alpha: Vec<f64> = exps.iter().map(|&e| e / denom).collect();
    let mut out = vec![0.0; k];
    for (jj, &a) in alpha.iter().enumerate() {
        let v = &vals[jj * k..(jj + 1) * k];
        for (o, &vv) in out.iter_mut().zip(v) {
            *o += a * vv;
        }
    }
    Some(ContextAt {
        rows,
        q,
        keys,
        vals,
        alpha,
        out,
    })
}

/// Gradients indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_A * x * x)
}
