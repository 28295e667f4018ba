//! Evaluation suite: 5-way span F1, single-annotation F1 (F1*), accuracy,
//! string-based F1, and long-answer F1, each with precision and recall.
//!
//! A prediction is treated as null when it carries the -inf sentinel or
//! when its span score `g` is not positive (the CLS alternative wins the
//! log-odds).

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use crate::corpus::{Annotation, AnnotationKind, Document, Location};
use crate::error::{Error, Result};
use crate::spanqa::SpanPrediction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// NQ-style 5-way: answerable iff >= 2 short annotations, match any.
    Span5,
    /// Single-annotation modified F1 (F1*).
    Span1,
    /// Exact string match (case-insensitive, whitespace-normalized).
    String,
    /// Fraction of documents where the span1 decision is correct.
    Accuracy,
    /// Long-answer segment match.
    Long,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_docs: usize,
}

impl EvalReport {
    fn from_counts(variant: Variant, tp: usize, fp: usize, fn_: usize, n_docs: usize) -> Self {
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        EvalReport {
            variant,
            f1,
            precision,
            recall,
            tp,
            fp,
            fn_,
            n_docs,
        }
    }

    /// Fixed-width text rendering (F1 / Prec / Rec columns).
    pub fn text_table(&self) -> String {
        format!(
            "{:<10} {:>6} {:>6} {:>6}\n{:<10} {:>6.1} {:>6.1} {:>6.1}\n",
            "variant",
            "F1",
            "Prec",
            "Rec",
            format!("{:?}", self.variant).to_lowercase(),
            self.f1 * 100.0,
            self.precision * 100.0,
            self.recall * 100.0,
        )
    }
}

fn normalize_string(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn short_annotations(doc: &Document) -> Vec<&Annotation> {
    doc.annotations
        .iter()
        .filter(|a| a.kind == AnnotationKind::Short && a.located_span().is_some())
        .collect()
}

/// Treat a prediction as an emitted answer only when its log-odds beat the
/// CLS alternative.
fn effective_answer(pred: Option<&SpanPrediction>) -> Option<&SpanPrediction> {
    pred.filter(|p| !p.is_null() && p.g > 0.0)
}

fn index_predictions<'a>(
    preds: &'a [SpanPrediction],
    gold: &[Document],
) -> Result<HashMap<&'a str, &'a SpanPrediction>> {
    let known: HashSet<&str> = gold.iter().map(|d| d.id.as_str()).collect();
    let mut map = HashMap::with_capacity(preds.len());
    for p in preds {
        if !known.contains(p.doc_id.as_str()) {
            return Err(Error::Validation {
                id: p.doc_id.clone(),
                message: "prediction for unknown document".into(),
            });
        }
        if map.insert(p.doc_id.as_str(), p).is_some() {
            return Err(Error::Validation {
                id: p.doc_id.clone(),
                message: "duplicate prediction".into(),
            });
        }
    }
    Ok(map)
}

fn span_matches(pred: &SpanPrediction, ann: &Annotation) -> bool {
    match (pred.location, pred.word_span, ann.located_span()) {
        (Some(ploc), Some(pspan), Some((aloc, aspan))) => ploc == aloc && pspan == aspan,
        _ => false,
    }
}

fn string_matches(pred: &SpanPrediction, ann: &Annotation) -> bool {
    ann.answer_string
        .as_deref()
        .map(|s| normalize_string(s) == normalize_string(&pred.answer_string))
        .unwrap_or(false)
}

/// Evaluate short-answer predictions under one metric variant.
pub fn evaluate(preds: &[SpanPrediction], gold: &[Document], variant: Variant) -> Result<EvalReport> {
    if variant == Variant::Long {
        return evaluate_long(preds, gold);
    }
    let by_id = index_predictions(preds, gold)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut correct = 0usize;

    for doc in gold {
        let shorts = short_annotations(doc);
        let pred = effective_answer(by_id.get(doc.id.as_str()).copied());
        let (answerable, matched) = match variant {
            Variant::Span5 => {
                let answerable = shorts.len() >= 2;
                let matched = pred.map(|p| shorts.iter().any(|a| span_matches(p, a)));
                (answerable, matched)
            }
            Variant::Span1 | Variant::Accuracy => {
                let single = shorts.first();
                let answerable = single.is_some();
                let matched = pred.map(|p| single.map(|a| span_matches(p, a)).unwrap_or(false));
                (answerable, matched)
            }
            Variant::String => {
                let answerable = !shorts.is_empty();
                let matched = pred.map(|p| shorts.iter().any(|a| string_matches(p, a)));
                (answerable, matched)
            }
            Variant::Long => unreachable!(),
        };

        match (answerable, matched) {
            (true, None) => fn_ += 1,
            (true, Some(true)) => {
                tp += 1;
                correct += 1;
            }
            (true, Some(false)) => {
                fp += 1;
                fn_ += 1;
            }
            (false, None) => correct += 1,
            (false, Some(_)) => fp += 1,
        }
    }

    if variant == Variant::Accuracy {
        let n = gold.len().max(1);
        let acc = correct as f64 / n as f64;
        return Ok(EvalReport {
            variant,
            f1: acc,
            precision: acc,
            recall: acc,
            tp: correct,
            fp: gold.len() - correct,
            fn_: 0,
            n_docs: gold.len(),
        });
    }
    Ok(EvalReport::from_counts(variant, tp, fp, fn_, gold.len()))
}

/// Long-answer evaluation: the predicted segment must match the segment of
/// any non-null gold annotation; answerable iff >= 2 non-null annotations.
pub fn evaluate_long(preds: &[SpanPrediction], gold: &[Document]) -> Result<EvalReport> {
    let by_id = index_predictions(preds, gold)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for doc in gold {
        let segments: HashSet<Location> = doc
            .annotations
            .iter()
            .filter(|a| a.kind != AnnotationKind::Null)
            .filter_map(|a| a.location)
            .collect();
        let answerable = doc
            .annotations
            .iter()
            .filter(|a| a.kind != AnnotationKind::Null && a.location.is_some())
            .count()
            >= 2;
        let pred = effective_answer(by_id.get(doc.id.as_str()).copied());
        let matched = pred.and_then(|p| p.long_answer).map(|seg| segments.contains(&seg));
        match (answerable, matched) {
            (true, None) => fn_ += 1,
            (true, Some(true)) => tp += 1,
            (true, Some(false)) => {
                fp += 1;
                fn_ += 1;
            }
            (false, None) => {}
            (false, Some(_)) => fp += 1,
        }
    }
    Ok(EvalReport::from_counts(Variant::Long, tp, fp, fn_, gold.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spanqa::ModelSource;

    fn doc(id: &str, annotations: Vec<Annotation>) -> Document {
        Document {
            id: id.into(),
            question: vec!["q".into()],
            paragraphs: vec![vec!["a".into(), "b".into(), "c".into()]],
            tables: vec![],
            annotations,
        }
    }

    fn short(loc: Location, span: (usize, usize), s: &str) -> Annotation {
        Annotation {
            kind: AnnotationKind::Short,
            location: Some(loc),
            span: Some(span),
            answer_string: Some(s.into()),
        }
    }

    fn pred(id: &str, loc: Location, span: (usize, usize), s: &str, g: f64) -> SpanPrediction {
        SpanPrediction {
            doc_id: id.into(),
            source: ModelSource::Generic,
            location: Some(loc),
            window: Some((0, 2)),
            start: 3,
            end: 3,
            g,
            kappa: -0.5,
            answer_string: s.into(),
            long_answer: Some(loc),
            word_span: Some(span),
        }
    }

    #[test]
    fn all_exact_matches_give_f1_one() {
        let gold = vec![
            doc("d0", vec![short(Location::Text(0), (0, 0), "a"), short(Location::Text(0), (0, 0), "a")]),
            doc("d1", vec![short(Location::Text(0), (1, 2), "b c"), short(Location::Text(0), (1, 2), "b c")]),
        ];
        let preds = vec![
            pred("d0", Location::Text(0), (0, 0), "a", 3.0),
            pred("d1", Location::Text(0), (1, 2), "b c", 2.0),
        ];
        let r = evaluate(&preds, &gold, Variant::Span5).unwrap();
        assert_eq!((r.f1, r.precision, r.recall), (1.0, 1.0, 1.0));
    }

    #[test]
    fn one_match_one_null_gives_two_thirds_f1() {
        // 2 answerable docs, 1 matched + 1 null pred:
        // precision 1.0, recall 0.5, F1 = 2/3.
        let gold = vec![
            doc("d0", vec![short(Location::Text(0), (0, 0), "a"), short(Location::Text(0), (0, 0), "a")]),
            doc("d1", vec![short(Location::Text(0), (1, 1), "b"), short(Location::Text(0), (1, 1), "b")]),
        ];
        let preds = vec![pred("d0", Location::Text(0), (0, 0), "a", 3.0)];
        let r = evaluate(&preds, &gold, Variant::Span5).unwrap();
        assert!((r.precision - 1.0).abs() < 1e-12);
        assert!((r.recall - 0.5).abs() < 1e-12);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unanswerable_doc_with_prediction_counts_fp_under_span5() {
        // One annotation only -> unanswerable under the 5-way rule.
        let gold = vec![doc("d0", vec![short(Location::Text(0), (0, 0), "a")])];
        let preds = vec![pred("d0", Location::Text(0), (0, 0), "a", 3.0)];
        let r = evaluate(&preds, &gold, Variant::Span5).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (0, 1, 0));
        // Under span1 the same doc is answerable and the pred matches.
        let r1 = evaluate(&preds, &gold, Variant::Span1).unwrap();
        assert_eq!((r1.tp, r1.fp, r1.fn_), (1, 0, 0));
    }

    #[test]
    fn non_positive_g_counts_as_null() {
        let gold = vec![doc("d0", vec![short(Location::Text(0), (0, 0), "a")])];
        let preds = vec![pred("d0", Location::Text(0), (0, 0), "a", 0.0)];
        let r = evaluate(&preds, &gold, Variant::Span1).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (0, 0, 1));
    }

    #[test]
    fn string_variant_normalizes_case_and_whitespace() {
        let gold = vec![doc("d0", vec![short(Location::Text(0), (1, 2), "b c")])];
        let mut p = pred("d0", Location::Text(0), (0, 1), "B    C", 2.0);
        p.word_span = Some((0, 1)); // wrong span, right string
        let span_r = evaluate(std::slice::from_ref(&p), &gold, Variant::Span1).unwrap();
        assert_eq!(span_r.tp, 0);
        let str_r = evaluate(std::slice::from_ref(&p), &gold, Variant::String).unwrap();
        assert_eq!(str_r.tp, 1);
    }

    #[test]
    fn long_match_ignores_short_span() {
        let mut gold_doc = doc(
            "d0",
            vec![
                short(Location::Text(0), (0, 0), "a"),
                short(Location::Text(0), (1, 1), "b"),
            ],
        );
        gold_doc.annotations.push(Annotation {
            kind: AnnotationKind::Long,
            location: Some(Location::Text(0)),
            span: None,
            answer_string: None,
        });
        let gold = vec![gold_doc];
        // Wrong short span, right segment.
        let p = pred("d0", Location::Text(0), (2, 2), "c", 2.0);
        let r = evaluate_long(std::slice::from_ref(&p), &gold).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 0));
    }

    #[test]
    fn null_on_unanswerable_is_a_correct_rejection() {
        let gold = vec![doc("d0", vec![])];
        let preds = vec![SpanPrediction::null("d0", ModelSource::Generic)];
        let r = evaluate_long(&preds, &gold).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (0, 0, 0));
        let r5 = evaluate(&preds, &gold, Variant::Span5).unwrap();
        assert_eq!((r5.tp, r5.fp, r5.fn_), (0, 0, 0));
    }

    #[test]
    fn unknown_doc_id_is_an_error() {
        let gold = vec![doc("d0", vec![])];
        let preds = vec![pred("ghost", Location::Text(0), (0, 0), "a", 1.0)];
        assert!(evaluate(&preds, &gold, Variant::Span5).is_err());
    }

    #[test]
    fn accuracy_counts_correct_nulls_and_matches() {
        let gold = vec![
            doc("d0", vec![short(Location::Text(0), (0, 0), "a")]),
            doc("d1", vec![]),
            doc("d2", vec![short(Location::Text(0), (1, 1), "b")]),
        ];
        let preds = vec![
            pred("d0", Location::Text(0), (0, 0), "a", 2.0),  // correct match
            SpanPrediction::null("d1", ModelSource::Generic), // correct rejection
            pred("d2", Location::Text(0), (2, 2), "c", 2.0),  // wrong span
        ];
        let r = evaluate(&preds, &gold, Variant::Accuracy).unwrap();
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
    }
}
