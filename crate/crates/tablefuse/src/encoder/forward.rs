//! Forward pass and gradient extraction.
//!
//! One attention sublayer computes, per head, scores
//! `s_ij = q_i . (k_j + r_t(i,j)) / sqrt(d_k)` softmaxed over keys, and
//! values `sum_j alpha_ij (v_j + rho_t(i,j))`; with no relation grid it is
//! the plain transformer. Context layers append the text-aware head before
//! the (extended) output projection.

#![allow(clippy::needless_range_loop)] // indexed loops mirror the math

use std::collections::BTreeMap;
use std::rc::Rc;

use super::{ContextStack, EncoderParams};
use crate::autograd::{ContextBundle, Gradients, RelGrid, StackData, Tape, Tensor, Var};
use crate::corpus::Table;
use crate::error::{Error, Result};
use crate::tablegraph::{LinearizedInput, Origin, RelationMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Hidden states only.
    None,
    /// Vocabulary logits per position.
    Mlm,
    /// Start/end span logits per position.
    Span,
}

/// A finished forward pass: the tape, the interesting output vars, and the
/// parameter-name-to-leaf map used to pull gradients out.
pub struct ForwardOutput {
    pub tape: Tape,
    pub hidden: Var,
    pub mlm_logits: Option<Var>,
    pub span_start: Option<Var>,
    pub span_end: Option<Var>,
    leaves: BTreeMap<String, Var>,
}

impl ForwardOutput {
    pub fn leaf(&self, name: &str) -> Option<Var> {
        self.leaves.get(name).copied()
    }

    pub fn hidden_tensor(&self) -> &Tensor {
        self.tape.value(self.hidden)
    }

    pub fn mlm_logits_tensor(&self) -> Option<&Tensor> {
        self.mlm_logits.map(|v| self.tape.value(v))
    }

    /// Start and end logits flattened to one value per position.
    pub fn span_logit_vectors(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let s = self.span_start?;
        let e = self.span_end?;
        Some((
            self.tape.value(s).data().to_vec(),
            self.tape.value(e).data().to_vec(),
        ))
    }

    /// Run the reverse pass and collect gradients for unfrozen parameters.
    pub fn backward(&mut self, loss: Var, params: &EncoderParams) -> Result<ParamGrads> {
        let grads = self.tape.backward(loss)?;
        Ok(collect_grads(&self.leaves, &grads, params))
    }
}

/// Named gradients for the unfrozen parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads(BTreeMap<String, Tensor>);

impl ParamGrads {
    pub fn from_named(name: &str, grad: Tensor) -> Self {
        let mut map = BTreeMap::new();
        map.insert(name.to_string(), grad);
        ParamGrads(map)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Element-wise accumulate (for multi-sequence batches).
    pub fn accumulate(&mut self, other: ParamGrads) {
        for (name, grad) in other.0 {
            match self.0.get_mut(&name) {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(grad.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.0.insert(name, grad);
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.0.values_mut() {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }
}

fn collect_grads(
    leaves: &BTreeMap<String, Var>,
    grads: &Gradients,
    params: &EncoderParams,
) -> ParamGrads {
    let mut out = BTreeMap::new();
    for (name, &var) in leaves {
        if params.is_frozen(name) {
            continue;
        }
        if let Some(g) = grads.get(var) {
            out.insert(name.clone(), g.clone());
        }
    }
    ParamGrads(out)
}

/// Convert a relation matrix into the bias-index grid the tape ops use.
fn to_grid(rel: &RelationMatrix) -> RelGrid {
    let n = rel.n;
    let mut grid = RelGrid::none(n);
    for i in 0..n {
        for j in 0..n {
            grid.set(i, j, rel.get(i, j).bias_index().map(|t| t as u8));
        }
    }
    grid
}

/// Bind per-table-word context stacks to the positions of one window.
/// `stacks` is indexed by the flattened table word index.
pub fn bind_stacks(
    input: &LinearizedInput,
    table: &Table,
    stacks: &[ContextStack],
    config_rows: usize,
    d_model: usize,
) -> Result<ContextBundle> {
    if stacks.len() != table.word_count() {
        return Err(Error::Consistency(format!(
            "{} stacks for a table of {} words",
            stacks.len(),
            table.word_count()
        )));
    }
    let per_pos: Vec<Option<usize>> = input
        .segment_map
        .iter()
        .map(|origin| match origin {
            Origin::Cell { row, col, word_idx, .. } => {
                let (start, _) = table.cell_word_range(*row, *col);
                Some(start + word_idx)
            }
            _ => None,
        })
        .collect();
    for s in stacks {
        if s.rows.shape() != [config_rows, d_model] {
            return Err(Error::Shape(format!(
                "context stack of shape {:?}, encoder expects [{config_rows}, {d_model}] \
                 (text and table encoders must share the hidden size)",
                s.rows.shape()
            )));
        }
    }
    let data: Vec<StackData> = stacks
        .iter()
        .map(|s| StackData {
            rows: s.rows.data().to_vec(),
            valid: s.valid.clone(),
        })
        .collect();
    Ok(ContextBundle {
        r: config_rows,
        d: d_model,
        per_pos,
        stacks: data,
    })
}

struct Builder<'p> {
    tape: Tape,
    leaves: BTreeMap<String, Var>,
    params: &'p EncoderParams,
    train: bool,
}

impl<'p> Builder<'p> {
    fn leaf(&mut self, name: &str) -> Var {
        if let Some(&v) = self.leaves.get(name) {
            return v;
        }
        let tensor = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .clone();
        let rg = self.train && !self.params.is_frozen(name);
        let var = self.tape.leaf(tensor, rg);
        self.leaves.insert(name.to_string(), var);
        var
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Var {
        let wv = self.leaf(w);
        let bv = self.leaf(b);
        let xw = self.tape.matmul(x, wv);
        self.tape.add_row_bias(xw, bv)
    }

    fn attention(
        &mut self,
        layer: usize,
        x: Var,
        grid: Option<&Rc<RelGrid>>,
        mask: &Rc<Vec<bool>>,
        bundle: Option<&Rc<ContextBundle>>,
    ) -> Var {
        let cfg = &self.params.config;
        let (m, k) = (cfg.n_heads, cfg.head_dim);
        let p = |s: &str| format!("layer{layer}.{s}");
        let q = self.linear(x, &p("attn.wq"), &p("attn.bq"));
        let key = self.linear(x, &p("attn.wk"), &p("attn.bk"));
        let val = self.linear(x, &p("attn.wv"), &p("attn.bv"));

        let mut heads = Vec::with_capacity(m + 1);
        for h in 0..m {
            let qh = self.tape.col_slice(q, h * k, k);
            let kh = self.tape.col_slice(key, h * k, k);
            let vh = self.tape.col_slice(val, h * k, k);
            let mut scores = self.tape.matmul_bt(qh, kh);
            if let Some(grid) = grid {
                let rel_k = self.leaf(&p(&format!("attn.rel_k.h{h}")));
                let bias = self.tape.rel_score_bias(qh, rel_k, Rc::clone(grid));
                scores = self.tape.add(scores, bias);
            }
            let scaled = self.tape.scale(scores, 1.0 / (k as f64).sqrt());
            let alpha = self.tape.softmax_masked_rows(scaled, Rc::clone(mask));
            let mut head = self.tape.matmul(alpha, vh);
            if let Some(grid) = grid {
                let rel_v = self.leaf(&p(&format!("attn.rel_v.h{h}")));
                let mix = self.tape.rel_value_mix(alpha, rel_v, Rc::clone(grid));
                head = self.tape.add(head, mix);
            }
            heads.push(head);
        }
        if cfg.is_context_layer(layer) {
            let bundle = bundle.expect("context layer requires stacks");
            let wq = self.leaf(&p("ctx.wq"));
            let wk = self.leaf(&p("ctx.wk"));
            let wv = self.leaf(&p("ctx.wv"));
            heads.push(self.tape.context_heads(x, wq, wk, wv, Rc::clone(bundle)));
        }
        let cat = self.tape.concat_cols(&heads);
        self.linear(cat, &p("attn.wo"), &p("attn.bo"))
    }

    fn layer_norm(&mut self, x: Var, gamma: &str, beta: &str) -> Var {
        let g = self.leaf(gamma);
        let b = self.leaf(beta);
        self.tape.layer_norm(x, g, b, 1e-12)
    }
}

/// Run the encoder over one linearized window.
///
/// `rel = None` selects the plain-transformer path. `bundle` must be given
/// exactly when the configuration has context layers.
pub fn run_forward(
    params: &EncoderParams,
    piece_ids: &[usize],
    rel: Option<&RelationMatrix>,
    bundle: Option<&Rc<ContextBundle>>,
    head: Head,
    train: bool,
) -> Result<ForwardOutput> {
    let cfg = &params.config;
    let n = piece_ids.len();
    if n == 0 || n > cfg.max_seq {
        return Err(Error::Input(format!(
            "sequence length {n} outside 1..={}",
            cfg.max_seq
        )));
    }
    if let Some(&bad) = piece_ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Input(format!("piece id {bad} outside vocabulary")));
    }
    if let Some(r) = rel {
        if r.n != n {
            return Err(Error::Shape(format!(
                "relation matrix of size {} for a window of {n} positions",
                r.n
            )));
        }
    }
    if cfg.has_context() != bundle.is_some() {
        return Err(Error::Consistency(
            "context stacks must be supplied exactly when context layers are configured".into(),
        ));
    }
    if let Some(b) = bundle {
        if b.per_pos.len() != n {
            return Err(Error::Shape(format!(
                "context bundle covers {} positions, window has {n}",
                b.per_pos.len()
            )));
        }
    }

    let grid = rel.map(|r| Rc::new(to_grid(r)));
    let mask = Rc::new(vec![true; n]);

    let mut b = Builder {
        tape: Tape::new(),
        leaves: BTreeMap::new(),
        params,
        train,
    };

    let tok_table = b.leaf("embed.token");
    let ids = Rc::new(piece_ids.to_vec());
    let tok = b.tape.embedding(tok_table, ids);
    let pos_table = b.leaf("embed.position");
    let pos_ids = Rc::new((0..n).collect::<Vec<usize>>());
    let pos = b.tape.embedding(pos_table, pos_ids);
    let summed = b.tape.add(tok, pos);
    let mut x = b.layer_norm(summed, "embed.ln.gamma", "embed.ln.beta");

    for l in 0..cfg.n_layers {
        let attn = b.attention(l, x, grid.as_ref(), &mask, bundle);
        let res = b.tape.add(x, attn);
        x = b.layer_norm(res, &format!("layer{l}.attn.ln.gamma"), &format!("layer{l}.attn.ln.beta"));
        let h1 = b.linear(x, &format!("layer{l}.ffn.w1"), &format!("layer{l}.ffn.b1"));
        let act = b.tape.gelu(h1);
        let h2 = b.linear(act, &format!("layer{l}.ffn.w2"), &format!("layer{l}.ffn.b2"));
        let res2 = b.tape.add(x, h2);
        x = b.layer_norm(res2, &format!("layer{l}.ffn.ln.gamma"), &format!("layer{l}.ffn.ln.beta"));
    }

    let (mlm_logits, span_start, span_end) = match head {
        Head::None => (None, None, None),
        Head::Mlm => (Some(b.linear(x, "mlm.w", "mlm.b")), None, None),
        Head::Span => {
            let s = b.linear(x, "span.start.w", "span.start.b");
            let e = b.linear(x, "span.end.w", "span.end.b");
            (None, Some(s), Some(e))
        }
    };
    b.tape.check_finite()?;
    Ok(ForwardOutput {
        tape: b.tape,
        hidden: x,
        mlm_logits,
        span_start,
        span_end,
        leaves: b.leaves,
    })
}

/// One relation-biased attention sublayer applied to an explicit input
/// matrix: per-head biased scores, masked softmax, biased value mix, head
/// concatenation and output projection. No residual or layer norm.
pub fn relation_attention(
    params: &EncoderParams,
    layer: usize,
    x: &Tensor,
    rel: Option<&RelationMatrix>,
    attn_mask: &[bool],
    bundle: Option<&Rc<ContextBundle>>,
) -> Result<Tensor> {
    let n = x.rows();
    if let Some(r) = rel {
        if r.n != n {
            return Err(Error::Shape(format!(
                "relation matrix of size {} for input of {n} rows",
                r.n
            )));
        }
    }
    if attn_mask.len() != n {
        return Err(Error::Shape("mask length must equal input rows".into()));
    }
    let grid = rel.map(|r| Rc::new(to_grid(r)));
    let mask = Rc::new(attn_mask.to_vec());
    let mut b = Builder {
        tape: Tape::new(),
        leaves: BTreeMap::new(),
        params,
        train: false,
    };
    let xv = b.tape.constant(x.clone());
    let out = b.attention(layer, xv, grid.as_ref(), &mask, bundle);
    b.tape.check_finite()?;
    Ok(b.tape.value(out).clone())
}
