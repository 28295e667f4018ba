//! Document-level span inference: window scoring with the CLS-baselined
//! span score `g`, the log-probability confidence `kappa`, best-span
//! selection under the 30-token cap, and long-answer segment mapping.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::ContextBundle;
use crate::contextlink::DocStacks;
use crate::corpus::{enumerate_windows, DatasetFilter, Document, Location, Table, WindowSpec};
use crate::encoder::{bind_stacks, run_forward, EncoderParams, Head};
use crate::error::{Error, Result};
use crate::tablegraph::{build_relations, linearize, linearize_words, LinearizedInput, RelationMatrix};
use crate::tokenizer::Vocab;

/// Longest answer span, in sub-word positions.
pub const MAX_ANSWER_TOKENS: usize = 30;

/// Which of the two independently trained models produced a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSource {
    Generic,
    Table,
}

/// The best span of one document. `start`/`end` are window piece positions;
/// `word_span` is the resolved word range within the located segment, which
/// is what evaluation compares against annotations. A null prediction (no
/// eligible window) carries `g = -inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub doc_id: String,
    pub source: ModelSource,
    pub location: Option<Location>,
    /// Window identity: body-row range for table windows, word range for
    /// text windows.
    pub window: Option<(usize, usize)>,
    pub start: usize,
    pub end: usize,
    #[serde(with = "neg_inf_as_null")]
    pub g: f64,
    #[serde(with = "neg_inf_as_null")]
    pub kappa: f64,
    pub answer_string: String,
    pub long_answer: Option<Location>,
    pub word_span: Option<(usize, usize)>,
}

impl SpanPrediction {
    /// Sentinel for a document with no eligible window.
    pub fn null(doc_id: &str, source: ModelSource) -> Self {
        SpanPrediction {
            doc_id: doc_id.to_string(),
            source,
            location: None,
            window: None,
            start: 0,
            end: 0,
            g: f64::NEG_INFINITY,
            kappa: f64::NEG_INFINITY,
            answer_string: String::new(),
            long_answer: None,
            word_span: None,
        }
    }

    pub fn is_null(&self) -> bool {
        self.location.is_none() || self.g == f64::NEG_INFINITY
    }
}

/// JSON cannot carry -inf; the sentinel becomes `null` on disk.
mod neg_inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

/// One candidate span of a window with its CLS-baselined score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSpan {
    pub start: usize,
    pub end: usize,
    pub g: f64,
}

/// All valid spans of one window ranked by `g` descending (ties: earlier
/// start, then earlier end). Valid means: inside answer-eligible positions,
/// not crossing a `[SEP]`, and at most 30 positions long.
/// `g(s, e) = f_start(s) + f_end(e) - f_start(CLS) - f_end(CLS)`.
#[allow(clippy::needless_range_loop)] // s and e index logits and origins together
pub fn score_spans(f_start: &[f64], f_end: &[f64], input: &LinearizedInput) -> Vec<ScoredSpan> {
    assert_eq!(f_start.len(), input.len());
    assert_eq!(f_end.len(), input.len());
    let base = f_start[0] + f_end[0];
    let n = input.len();
    let mut spans = Vec::new();
    for s in 0..n {
        if !input.segment_map[s].answer_eligible() {
            continue;
        }
        for e in s..n.min(s + MAX_ANSWER_TOKENS) {
            if !input.segment_map[e].answer_eligible() {
                break; // a special closes the answer unit
            }
            spans.push(ScoredSpan {
                start: s,
                end: e,
                g: f_start[s] + f_end[e] - base,
            });
        }
    }
    spans.sort_by(|a, b| {
        b.g.partial_cmp(&a.g)
            .expect("finite scores")
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
    });
    spans
}

/// `kappa = log softmax_start(s) + log softmax_end(e)` over the window's
/// positions. Always <= 0.
pub fn confidence(f_start: &[f64], f_end: &[f64], s: usize, e: usize) -> f64 {
    log_softmax_at(f_start, s) + log_softmax_at(f_end, e)
}

fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = maxv + logits.iter().map(|&v| (v - maxv).exp()).sum::<f64>().ln();
    logits[idx] - lse
}

/// Inference mode: the generic model treats tables as running text; the
/// table model windows tables only, with relation matrices and (if the
/// encoder is context-capable) the linked context stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictMode {
    Generic,
    Table,
}

impl PredictMode {
    pub fn source(self) -> ModelSource {
        match self {
            PredictMode::Generic => ModelSource::Generic,
            PredictMode::Table => ModelSource::Table,
        }
    }
}

struct WindowCandidate {
    location: Location,
    window: (usize, usize),
    start: usize,
    end: usize,
    g: f64,
    kappa: f64,
    word_span: (usize, usize),
}

/// Predict the best span of one document: every window is scored, candidate
/// spans are deduplicated across overlapping windows by maximum `g`, and
/// the global argmax wins (earlier window on ties). The long answer is the
/// segment containing the chosen span.
pub fn predict_document(
    doc: &Document,
    params: &EncoderParams,
    vocab: &Vocab,
    mode: PredictMode,
    stacks: Option<&DocStacks>,
) -> Result<SpanPrediction> {
    let cfg = &params.config;
    // Keep linearized windows comfortably inside the encoder cap.
    let spec = WindowSpec {
        max_words: (cfg.max_seq / 2).max(8),
    };
    let mut candidates: Vec<WindowCandidate> = Vec::new();
    let mut dedup: HashMap<(Location, (usize, usize)), usize> = HashMap::new();
    let consider = |cand: WindowCandidate,
                        dedup: &mut HashMap<(Location, (usize, usize)), usize>,
                        candidates: &mut Vec<WindowCandidate>| {
        let key = (cand.location, cand.word_span);
        match dedup.get(&key) {
            Some(&idx) => {
                if cand.g > candidates[idx].g {
                    candidates[idx] = cand;
                }
            }
            None => {
                dedup.insert(key, candidates.len());
                candidates.push(cand);
            }
        }
    };

    match mode {
        PredictMode::Generic => {
            for (p, para) in doc.paragraphs.iter().enumerate() {
                if para.is_empty() {
                    continue;
                }
                for window in word_windows(para.len(), spec.max_words) {
                    let input = linearize_words(
                        &doc.question,
                        para,
                        vocab,
                        cfg.max_seq,
                        window,
                        &format!("p{p}"),
                    )?;
                    if let Some(c) =
                        score_window(params, &input, None, None, None, Location::Text(p), window)?
                    {
                        consider(c, &mut dedup, &mut candidates);
                    }
                }
            }
            // Tables as running text, flattened in row-major cell order.
            for (t, table) in doc.tables.iter().enumerate() {
                let words: Vec<String> = table.words().iter().map(|w| w.to_string()).collect();
                if words.is_empty() {
                    continue;
                }
                for window in word_windows(words.len(), spec.max_words) {
                    let input = linearize_words(
                        &doc.question,
                        &words,
                        vocab,
                        cfg.max_seq,
                        window,
                        &table.id,
                    )?;
                    if let Some(c) =
                        score_window(params, &input, None, None, None, Location::Table(t), window)?
                    {
                        consider(c, &mut dedup, &mut candidates);
                    }
                }
            }
        }
        PredictMode::Table => {
            for win in enumerate_windows(doc, DatasetFilter::TablesOnly, spec) {
                let Location::Table(t) = win.segment else { continue };
                let table = &doc.tables[t];
                let rows = win.row_range.expect("table windows carry row ranges");
                let input = linearize(&doc.question, table, vocab, cfg.max_seq, rows)?;
                let rel = build_relations(&input, table)?;
                let bundle = if cfg.has_context() {
                    let table_stacks = stacks
                        .and_then(|ds| ds.tables.iter().find(|ts| ts.table_id == table.id))
                        .ok_or_else(|| {
                            Error::Consistency(format!("no context stacks for table {:?}", table.id))
                        })?;
                    Some(Rc::new(bind_stacks(
                        &input,
                        table,
                        &table_stacks.stacks,
                        cfg.context_rows,
                        cfg.d_model(),
                    )?))
                } else {
                    None
                };
                if let Some(c) = score_window(
                    params,
                    &input,
                    Some(&rel),
                    bundle.as_ref(),
                    Some(table),
                    Location::Table(t),
                    rows,
                )? {
                    consider(c, &mut dedup, &mut candidates);
                }
            }
        }
    }

    let Some(best) = candidates.iter().fold(None::<&WindowCandidate>, |acc, c| match acc {
        Some(b) if b.g >= c.g => Some(b),
        _ => Some(c),
    }) else {
        return Ok(SpanPrediction::null(&doc.id, mode.source()));
    };

    let words = doc.segment_words(best.location).expect("candidate location is valid");
    let answer_string = words[best.word_span.0..=best.word_span.1].join(" ");
    Ok(SpanPrediction {
        doc_id: doc.id.clone(),
        source: mode.source(),
        location: Some(best.location),
        window: Some(best.window),
        start: best.start,
        end: best.end,
        g: best.g,
        kappa: best.kappa,
        answer_string,
        long_answer: Some(best.location),
        word_span: Some(best.word_span),
    })
}

#[allow(clippy::too_many_arguments)]
fn score_window(
    params: &EncoderParams,
    input: &LinearizedInput,
    rel: Option<&RelationMatrix>,
    bundle: Option<&Rc<ContextBundle>>,
    table: Option<&Table>,
    location: Location,
    window: (usize, usize),
) -> Result<Option<WindowCandidate>> {
    // A context-capable encoder scoring a window without table positions
    // still needs an (empty) binding.
    let empty_bundle;
    let bundle = if params.config.has_context() && bundle.is_none() {
        empty_bundle = Rc::new(ContextBundle {
            r: params.config.context_rows,
            d: params.config.d_model(),
            per_pos: vec![None; input.len()],
            stacks: Vec::new(),
        });
        Some(&empty_bundle)
    } else {
        bundle
    };
    let out = run_forward(params, &input.piece_ids, rel, bundle, Head::Span, false)?;
    let (fs, fe) = out.span_logit_vectors().expect("span head requested");
    let spans = score_spans(&fs, &fe, input);
    let Some(top) = spans.first() else {
        return Ok(None);
    };
    let word_span = input
        .word_span(table, top.start, top.end)
        .ok_or_else(|| Error::Consistency("eligible span must map to segment words".into()))?;
    Ok(Some(WindowCandidate {
        location,
        window,
        start: top.start,
        end: top.end,
        g: top.g,
        kappa: confidence(&fs, &fe, top.start, top.end),
        word_span,
    }))
}

/// Half-overlapping word windows covering `0..len`.
fn word_windows(len: usize, max_words: usize) -> Vec<(usize, usize)> {
    if len <= max_words {
        return vec![(0, len - 1)];
    }
    let stride = (max_words / 2).max(1);
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + max_words - 1).min(len - 1);
        out.push((start, end));
        if end + 1 >= len {
            break;
        }
        start += stride;
    }
    out
}

/// Predict every document of a corpus.
pub fn predict_corpus(
    corpus: &[Document],
    params: &EncoderParams,
    vocab: &Vocab,
    mode: PredictMode,
    stacks: Option<&[DocStacks]>,
) -> Result<Vec<SpanPrediction>> {
    let by_doc: HashMap<&str, &DocStacks> = stacks
        .map(|all| all.iter().map(|d| (d.doc_id.as_str(), d)).collect())
        .unwrap_or_default();
    corpus
        .iter()
        .map(|doc| predict_document(doc, params, vocab, mode, by_doc.get(doc.id.as_str()).copied()))
        .collect()
}

/// Prediction JSONL, one object per document.
pub fn save_predictions(path: impl AsRef<Path>, preds: &[SpanPrediction]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for p in preds {
        let line = serde_json::to_string(p).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<SpanPrediction>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut preds = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: SpanPrediction = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        preds.push(p);
    }
    Ok(preds)
}
