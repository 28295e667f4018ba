//! Shared test support: an independent naive forward pass (plain loops, no
//! tape), finite-difference gradient checking, and brute-force oracles for
//! the linker and the relation matrix. Everything here is deliberately
//! written from the definitions, independent of the library's compute path.

#![allow(clippy::needless_range_loop)] // indexed loops mirror the math

#![allow(dead_code)]

use std::collections::HashSet;

use tablefuse::autograd::{ContextBundle, StackData, Tensor};
use tablefuse::contextlink::{FrequentWordList, MatchSet, NgramMatch, MAX_MATCHES};
use tablefuse::corpus::Table;
use tablefuse::encoder::{ContextStack, EncoderParams};
use tablefuse::tablegraph::{LinearizedInput, Origin, RelationMatrix, RelationType};

// ---------------------------------------------------------------------------
// Naive encoder forward (oracle)
// ---------------------------------------------------------------------------

pub struct NaiveOutput {
    pub hidden: Vec<Vec<f64>>,
    pub mlm_logits: Option<Vec<Vec<f64>>>,
    pub span_logits: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum NaiveHead {
    None,
    Mlm,
    Span,
}

/// Per-position context stacks for the naive pass: `stacks[pos]` is
/// `Some((rows, valid))` for positions that have one.
pub type NaiveStacks = Vec<Option<(Vec<Vec<f64>>, Vec<bool>)>>;

fn mat(params: &EncoderParams, name: &str) -> Vec<Vec<f64>> {
    let t = params.get(name).unwrap_or_else(|| panic!("missing {name}"));
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn vecp(params: &EncoderParams, name: &str) -> Vec<f64> {
    params
        .get(name)
        .unwrap_or_else(|| panic!("missing {name}"))
        .data()
        .to_vec()
}

fn matvec_rows(x: &[Vec<f64>], w: &[Vec<f64>], b: Option<&[f64]>) -> Vec<Vec<f64>> {
    // y[i][j] = sum_k x[i][k] w[k][j] + b[j]
    let cols = w[0].len();
    x.iter()
        .map(|row| {
            let mut out = vec![0.0; cols];
            for (k, &xv) in row.iter().enumerate() {
                for j in 0..cols {
                    out[j] += xv * w[k][j];
                }
            }
            if let Some(b) = b {
                for j in 0..cols {
                    out[j] += b[j];
                }
            }
            out
        })
        .collect()
}

fn layer_norm_rows(x: &[Vec<f64>], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let istd = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| gamma[j] * (v - mean) * istd + beta[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let k = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (k * (x + 0.044_715 * x * x * x)).tanh())
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Straight-from-the-definitions encoder forward. Computes, per head,
/// `s_ij = q_i . (k_j + r_t(i,j)) / sqrt(dk)` and
/// `w_i = sum_j alpha_ij (v_j + rho_t(i,j))`, appends the context head on
/// configured layers, projects, and applies the post-norm residual blocks.
pub fn naive_forward(
    params: &EncoderParams,
    piece_ids: &[usize],
    rel: Option<&RelationMatrix>,
    stacks: Option<&NaiveStacks>,
    head: NaiveHead,
) -> NaiveOutput {
    let cfg = &params.config;
    let n = piece_ids.len();
    let d = cfg.d_model();
    let (m, k) = (cfg.n_heads, cfg.head_dim);

    let tok = mat(params, "embed.token");
    let pos = mat(params, "embed.position");
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..d)
                .map(|j| tok[piece_ids[i]][j] + pos[i][j])
                .collect()
        })
        .collect();
    x = layer_norm_rows(
        &x,
        &vecp(params, "embed.ln.gamma"),
        &vecp(params, "embed.ln.beta"),
        1e-12,
    );

    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        let q = matvec_rows(&x, &mat(params, &p("attn.wq")), Some(&vecp(params, &p("attn.bq"))));
        let key = matvec_rows(&x, &mat(params, &p("attn.wk")), Some(&vecp(params, &p("attn.bk"))));
        let val = matvec_rows(&x, &mat(params, &p("attn.wv")), Some(&vecp(params, &p("attn.bv"))));

        let is_ctx = cfg.is_context_layer(l);
        let total_heads = if is_ctx { m + 1 } else { m };
        let mut cat: Vec<Vec<f64>> = vec![vec![0.0; total_heads * k]; n];

        for h in 0..m {
            let rel_k = rel.map(|_| mat(params, &p(&format!("attn.rel_k.h{h}"))));
            let rel_v = rel.map(|_| mat(params, &p(&format!("attn.rel_v.h{h}"))));
            for i in 0..n {
                let qh = &q[i][h * k..(h + 1) * k];
                let mut scores = vec![0.0; n];
                for j in 0..n {
                    let kh = &key[j][h * k..(h + 1) * k];
                    let mut s: f64 = qh.iter().zip(kh).map(|(a, b)| a * b).sum();
                    if let (Some(rm), Some(rk)) = (rel, rel_k.as_ref()) {
                        if let Some(t) = rm.get(i, j).bias_index() {
                            s += qh.iter().zip(&rk[t]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    scores[j] = s / (k as f64).sqrt();
                }
                let alpha = softmax(&scores);
                let mut out = vec![0.0; k];
                for j in 0..n {
                    let vh = &val[j][h * k..(h + 1) * k];
                    for c in 0..k {
                        out[c] += alpha[j] * vh[c];
                    }
                    if let (Some(rm), Some(rv)) = (rel, rel_v.as_ref()) {
                        if let Some(t) = rm.get(i, j).bias_index() {
                            for c in 0..k {
                                out[c] += alpha[j] * rv[t][c];
                            }
                        }
                    }
                }
                cat[i][h * k..(h + 1) * k].copy_from_slice(&out);
            }
        }
        if is_ctx {
            let wq = mat(params, &p("ctx.wq"));
            let wk = mat(params, &p("ctx.wk"));
            let wv = mat(params, &p("ctx.wv"));
            let stacks = stacks.expect("context layer needs stacks");
            for i in 0..n {
                let mut out = vec![0.0; k];
                if let Some((rows, valid)) = &stacks[i] {
                    let valid_rows: Vec<usize> =
                        (0..valid.len()).filter(|&j| valid[j]).collect();
                    if !valid_rows.is_empty() {
                        let qi: Vec<f64> = (0..k)
                            .map(|c| (0..d).map(|r| x[i][r] * wq[r][c]).sum())
                            .collect();
                        let mut scores = Vec::new();
                        let mut vals = Vec::new();
                        for &j in &valid_rows {
                            let kj: Vec<f64> = (0..k)
                                .map(|c| (0..d).map(|r| rows[j][r] * wk[r][c]).sum())
                                .collect();
                            let vj: Vec<f64> = (0..k)
                                .map(|c| (0..d).map(|r| rows[j][r] * wv[r][c]).sum())
                                .collect();
                            scores.push(
                                qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>()
                                    / (k as f64).sqrt(),
                            );
                            vals.push(vj);
                        }
                        let alpha = softmax(&scores);
                        for (a, v) in alpha.iter().zip(&vals) {
                            for c in 0..k {
                                out[c] += a * v[c];
                            }
                        }
                    }
                }
                cat[i][m * k..(m + 1) * k].copy_from_slice(&out);
            }
        }

        let attn = matvec_rows(&cat, &mat(params, &p("attn.wo")), Some(&vecp(params, &p("attn.bo"))));
        let mut res: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|j| x[i][j] + attn[i][j]).collect())
            .collect();
        res = layer_norm_rows(
            &res,
            &vecp(params, &p("attn.ln.gamma")),
            &vecp(params, &p("attn.ln.beta")),
            1e-12,
        );
        let h1 = matvec_rows(&res, &mat(params, &p("ffn.w1")), Some(&vecp(params, &p("ffn.b1"))));
        let act: Vec<Vec<f64>> = h1
            .iter()
            .map(|row| row.iter().map(|&v| gelu(v)).collect())
            .collect();
        let h2 = matvec_rows(&act, &mat(params, &p("ffn.w2")), Some(&vecp(params, &p("ffn.b2"))));
        let mut res2: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|j| res[i][j] + h2[i][j]).collect())
            .collect();
        res2 = layer_norm_rows(
            &res2,
            &vecp(params, &p("ffn.ln.gamma")),
            &vecp(params, &p("ffn.ln.beta")),
            1e-12,
        );
        x = res2;
    }

    let mlm_logits = (head == NaiveHead::Mlm).then(|| {
        matvec_rows(&x, &mat(params, "mlm.w"), Some(&vecp(params, "mlm.b")))
    });
    let span_logits = (head == NaiveHead::Span).then(|| {
        let ws = mat(params, "span.start.w");
        let bs = vecp(params, "span.start.b");
        let we = mat(params, "span.end.w");
        let be = vecp(params, "span.end.b");
        let fs: Vec<f64> = x
            .iter()
            .map(|row| row.iter().zip(&ws).map(|(v, w)| v * w[0]).sum::<f64>() + bs[0])
            .collect();
        let fe: Vec<f64> = x
            .iter()
            .map(|row| row.iter().zip(&we).map(|(v, w)| v * w[0]).sum::<f64>() + be[0])
            .collect();
        (fs, fe)
    });
    NaiveOutput {
        hidden: x,
        mlm_logits,
        span_logits,
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// Central finite difference of `loss_fn` w.r.t. one coordinate of one
/// named tensor.
pub fn finite_diff<F>(params: &EncoderParams, name: &str, coord: usize, h: f64, loss_fn: F) -> f64
where
    F: Fn(&EncoderParams) -> f64,
{
    let mut plus = params.clone();
    plus.get_mut(name).unwrap().data_mut()[coord] += h;
    let mut minus = params.clone();
    minus.get_mut(name).unwrap().data_mut()[coord] -= h;
    (loss_fn(&plus) - loss_fn(&minus)) / (2.0 * h)
}

/// Relative error with an absolute floor for near-zero gradients (central
/// differences at h=1e-5 are only accurate to ~1e-9 absolute).
pub fn grad_rel_err(ad: f64, fd: f64) -> f64 {
    let denom = ad.abs().max(fd.abs()).max(1e-4);
    (ad - fd).abs() / denom
}

/// Deterministic coordinate sample of a tensor.
pub fn sample_coords(t: &Tensor, want: usize) -> Vec<usize> {
    let n = t.numel();
    if n <= want {
        return (0..n).collect();
    }
    (0..want).map(|i| (i * n) / want + (i % 3)).map(|c| c % n).collect()
}

// ---------------------------------------------------------------------------
// Brute-force linker oracle
// ---------------------------------------------------------------------------

/// Literal restatement of the linking rules: for every table word, scan all
/// paragraph positions at each n-gram length (trigram, bigram, unigram in
/// that order), skip expressions made only of frequent words, deduplicate
/// locations, cap at six.
pub fn oracle_link(table: &Table, paragraphs: &[Vec<String>], freq: &FrequentWordList) -> MatchSet {
    let lower = |w: &str| w.to_lowercase();
    let mut per_word = Vec::new();
    for row in &table.cells {
        for cell in row {
            for word_idx in 0..cell.len() {
                let mut found: Vec<NgramMatch> = Vec::new();
                let mut seen: HashSet<(usize, usize)> = HashSet::new();
                for n in [3usize, 2, 1] {
                    if word_idx + n > cell.len() {
                        continue;
                    }
                    let expr: Vec<String> =
                        cell[word_idx..word_idx + n].iter().map(|w| lower(w)).collect();
                    if expr.iter().all(|w| freq.contains(w)) {
                        continue;
                    }
                    for (p, para) in paragraphs.iter().enumerate() {
                        if para.len() < n {
                            continue;
                        }
                        for start in 0..=para.len() - n {
                            if found.len() >= MAX_MATCHES {
                                break;
                            }
                            let window: Vec<String> =
                                para[start..start + n].iter().map(|w| lower(w)).collect();
                            if window == expr && !seen.contains(&(p, start)) {
                                seen.insert((p, start));
                                found.push(NgramMatch { paragraph: p, start, len: n });
                            }
                        }
                    }
                }
                found.truncate(MAX_MATCHES);
                per_word.push(found);
            }
        }
    }
    MatchSet { per_word }
}

// ---------------------------------------------------------------------------
// Brute-force relation oracle
// ---------------------------------------------------------------------------

/// Exhaustive pair enumeration applying the five relation definitions with
/// explicit precedence, straight from their statements.
pub fn oracle_relations(input: &LinearizedInput, table: &Table) -> Vec<Vec<RelationType>> {
    let n = input.len();
    let h = table.header_row_count;
    let cell_of = |p: usize| match input.segment_map[p] {
        Origin::Cell { row, col, .. } => Some((row, col)),
        _ => None,
    };
    let mut out = vec![vec![RelationType::None; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (Some((ri, ci)), Some((rj, cj))) = (cell_of(i), cell_of(j)) else {
                continue;
            };
            let in_cell = ri == rj && ci == cj;
            let cell_col = ri >= h && rj < h && ci == cj;
            let cell_row = ri >= h && rj == ri && cj == 0 && !(in_cell);
            let cross_col = ri < h && rj < h && !(ri == rj && ci == cj);
            let cross_row = ri >= h && rj >= h && ci == 0 && cj == 0 && ri != rj;
            out[i][j] = if in_cell {
                RelationType::InCell
            } else if cell_col {
                RelationType::CellCol
            } else if cell_row {
                RelationType::CellRow
            } else if cross_col {
                RelationType::CrossCol
            } else if cross_row {
                RelationType::CrossRow
            } else {
                RelationType::None
            };
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Stack builders for encoder tests
// ---------------------------------------------------------------------------

/// Random synthetic context stacks bound directly to a window's positions:
/// cell tokens get rows with a mixed validity pattern (including some fully
/// invalid stacks), everything else none.
pub fn synthetic_stacks(
    input: &LinearizedInput,
    r: usize,
    d: usize,
    seed: u64,
) -> (ContextBundle, NaiveStacks) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut per_pos: Vec<Option<usize>> = vec![None; input.len()];
    let mut stacks: Vec<StackData> = Vec::new();
    let mut naive: NaiveStacks = vec![None; input.len()];
    for (pos, origin) in input.segment_map.iter().enumerate() {
        if matches!(origin, Origin::Cell { .. }) {
            let mut stack = ContextStack::empty(r, d);
            let valid_rows = rng.gen_range(0..=r);
            for row in 0..valid_rows {
                stack.valid[row] = true;
                for c in 0..d {
                    stack.rows.data_mut()[row * d + c] = rng.gen_range(-0.5..0.5);
                }
            }
            let rows_vec: Vec<Vec<f64>> = (0..r).map(|row| stack.rows.row(row).to_vec()).collect();
            naive[pos] = Some((rows_vec, stack.valid.clone()));
            per_pos[pos] = Some(stacks.len());
            stacks.push(StackData {
                rows: stack.rows.data().to_vec(),
                valid: stack.valid.clone(),
            });
        }
    }
    (
        ContextBundle {
            r,
            d,
            per_pos,
            stacks,
        },
        naive,
    )
}
