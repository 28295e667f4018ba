//! Late fusion of the generic and table models: the alpha/beta/gamma gated
//! max rule plus the validation grid search over string-based F1.
//!
//! The table prediction can only override the generic one when the generic
//! model's long answer already points at a table and the table model is
//! confident (`kappa_t > gamma`); then the fused score is
//! `max(g_c, alpha * g_t + beta)`.

use std::collections::HashMap;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{Document, Location};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Variant};
use crate::spanqa::SpanPrediction;

/// Fusion parameters; `gamma = +inf` disables the override entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub alpha: f64,
    pub beta: f64,
    #[serde(serialize_with = "ser_inf", deserialize_with = "de_inf")]
    pub gamma: f64,
}

impl FusionParams {
    /// The degenerate point: fusion output equals the generic model.
    pub fn generic_only() -> Self {
        FusionParams {
            alpha: 1.0,
            beta: 0.0,
            gamma: f64::INFINITY,
        }
    }
}

fn ser_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

fn de_inf<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum NumOrStr {
        Num(f64),
        Str(String),
    }
    match NumOrStr::deserialize(d)? {
        NumOrStr::Num(v) => Ok(v),
        NumOrStr::Str(s) => match s.trim().to_lowercase().as_str() {
            "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
            other => Err(D::Error::custom(format!("not a gamma value: {other:?}"))),
        },
    }
}

/// Outcome of fusing one document's pair of predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    pub chosen: SpanPrediction,
    pub g: f64,
    pub override_applied: bool,
}

/// Combine one generic and one table prediction.
///
/// Gate: the generic long answer points to a table AND `kappa_t > gamma`.
/// Open gate: `g = max(g_c, alpha * g_t + beta)`, the winner's span is kept
/// (ties go to the generic model) and the fused score replaces its `g`.
/// Closed gate: the generic prediction passes through unchanged.
pub fn fuse(
    pred_c: &SpanPrediction,
    pred_t: &SpanPrediction,
    fp: &FusionParams,
) -> Result<FusedPrediction> {
    if pred_c.doc_id != pred_t.doc_id {
        return Err(Error::Consistency(format!(
            "fusing predictions of different documents: {:?} vs {:?}",
            pred_c.doc_id, pred_t.doc_id
        )));
    }
    let generic_points_at_table = matches!(pred_c.long_answer, Some(Location::Table(_)));
    let gate_open = generic_points_at_table && pred_t.kappa > fp.gamma;
    if !gate_open {
        return Ok(FusedPrediction {
            chosen: pred_c.clone(),
            g: pred_c.g,
            override_applied: false,
        });
    }
    let scaled_t = fp.alpha * pred_t.g + fp.beta;
    if scaled_t > pred_c.g {
        let mut chosen = pred_t.clone();
        chosen.g = scaled_t;
        Ok(FusedPrediction {
            chosen,
            g: scaled_t,
            override_applied: true,
        })
    } else {
        Ok(FusedPrediction {
            chosen: pred_c.clone(),
            g: pred_c.g,
            override_applied: false,
        })
    }
}

/// Fuse whole prediction files, aligning by doc id. Documents missing from
/// the table side pass the generic prediction through.
pub fn fuse_all(
    preds_c: &[SpanPrediction],
    preds_t: &[SpanPrediction],
    fp: &FusionParams,
) -> Result<Vec<SpanPrediction>> {
    let by_id: HashMap<&str, &SpanPrediction> =
        preds_t.iter().map(|p| (p.doc_id.as_str(), p)).collect();
    preds_c
        .iter()
        .map(|c| match by_id.get(c.doc_id.as_str()) {
            Some(t) => fuse(c, t, fp).map(|f| f.chosen),
            None => Ok(c.clone()),
        })
        .collect()
}

/// Grid specification; gammas may include `"inf"`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    #[serde(serialize_with = "ser_inf_vec", deserialize_with = "de_inf_vec")]
    pub gamma: Vec<f64>,
}

fn ser_inf_vec<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        if x.is_finite() {
            seq.serialize_element(x)?;
        } else {
            seq.serialize_element("inf")?;
        }
    }
    seq.end()
}

fn de_inf_vec<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum NumOrStr {
        Num(f64),
        Str(String),
    }
    Vec::<NumOrStr>::deserialize(d)?
        .into_iter()
        .map(|v| match v {
            NumOrStr::Num(x) => Ok(x),
            NumOrStr::Str(s) => match s.trim().to_lowercase().as_str() {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                other => Err(D::Error::custom(format!("not a gamma value: {other:?}"))),
            },
        })
        .collect()
}

impl Default for GridSpec {
    /// Spans the confidence thresholds the ablations land on, plus the
    /// degenerate generic-only point.
    fn default() -> Self {
        GridSpec {
            alpha: vec![0.25, 0.5, 1.0, 2.0],
            beta: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            gamma: vec![-3.0, -1.0, -0.5, -0.1, -0.025, -0.005, f64::INFINITY],
        }
    }
}

/// Exhaustive grid search maximizing validation string-F1. Ties prefer
/// conservative fusion: larger gamma, then smaller alpha, then smaller
/// |beta|, then smaller beta.
pub fn grid_search(
    preds_c: &[SpanPrediction],
    preds_t: &[SpanPrediction],
    gold: &[Document],
    grid: &GridSpec,
) -> Result<(FusionParams, f64)> {
    if grid.alpha.is_empty() || grid.beta.is_empty() || grid.gamma.is_empty() {
        return Err(Error::Config("fusion grid must be non-empty".into()));
    }
    let mut best: Option<(FusionParams, f64)> = None;
    for &gamma in &grid.gamma {
        for &alpha in &grid.alpha {
            for &beta in &grid.beta {
                let fp = FusionParams { alpha, beta, gamma };
                let fused = fuse_all(preds_c, preds_t, &fp)?;
                let f1 = evaluate(&fused, gold, Variant::String)?.f1;
                let better = match &best {
                    None => true,
                    Some((bp, bf1)) => {
                        f1 > *bf1
                            || (f1 == *bf1
                                && (gamma > bp.gamma
                                    || (gamma == bp.gamma
                                        && (alpha < bp.alpha
                                            || (alpha == bp.alpha
                                                && (beta.abs() < bp.beta.abs()
                                                    || (beta.abs() == bp.beta.abs()
                                                        && beta < bp.beta)))))))
                    }
                };
                if better {
                    best = Some((fp, f1));
                }
            }
        }
    }
    Ok(best.expect("non-empty grid"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spanqa::ModelSource;

    fn pred(doc: &str, source: ModelSource, loc: Location, g: f64, kappa: f64) -> SpanPrediction {
        SpanPrediction {
            doc_id: doc.into(),
            source,
            location: Some(loc),
            window: Some((0, 1)),
            start: 3,
            end: 3,
            g,
            kappa,
            answer_string: "x".into(),
            long_answer: Some(loc),
            word_span: Some((0, 0)),
        }
    }

    #[test]
    fn low_confidence_keeps_the_generic_prediction() {
        let c = pred("d", ModelSource::Generic, Location::Table(0), 3.0, -0.2);
        let t = pred("d", ModelSource::Table, Location::Table(0), 9.0, -2.0);
        let fp = FusionParams { alpha: 1.0, beta: 0.0, gamma: -1.0 };
        let fused = fuse(&c, &t, &fp).unwrap();
        assert!(!fused.override_applied);
        assert_eq!(fused.g, 3.0);
        assert_eq!(fused.chosen.source, ModelSource::Generic);
    }

    #[test]
    fn text_long_answer_never_fuses() {
        let c = pred("d", ModelSource::Generic, Location::Text(0), 0.5, -0.2);
        let t = pred("d", ModelSource::Table, Location::Table(0), 9.0, -0.01);
        let fp = FusionParams { alpha: 1.0, beta: 0.0, gamma: -3.0 };
        let fused = fuse(&c, &t, &fp).unwrap();
        assert!(!fused.override_applied);
        assert_eq!(fused.chosen.source, ModelSource::Generic);
    }

    #[test]
    fn open_gate_takes_the_scaled_max() {
        let c = pred("d", ModelSource::Generic, Location::Table(0), 3.0, -0.2);
        let t = pred("d", ModelSource::Table, Location::Table(0), 5.0, -0.05);
        let fp = FusionParams { alpha: 1.0, beta: 0.0, gamma: -1.0 };
        let fused = fuse(&c, &t, &fp).unwrap();
        assert!(fused.override_applied);
        assert_eq!(fused.g, 5.0);
        assert_eq!(fused.chosen.source, ModelSource::Table);
        // Ties go to the generic model.
        let t_tie = pred("d", ModelSource::Table, Location::Table(0), 3.0, -0.05);
        let fused = fuse(&c, &t_tie, &fp).unwrap();
        assert!(!fused.override_applied);
        assert_eq!(fused.chosen.source, ModelSource::Generic);
    }

    #[test]
    fn infinite_gamma_is_the_identity() {
        let c = pred("d", ModelSource::Generic, Location::Table(0), 1.0, -0.2);
        let t = pred("d", ModelSource::Table, Location::Table(0), 50.0, -1e-9);
        let fused = fuse(&c, &t, &FusionParams::generic_only()).unwrap();
        assert!(!fused.override_applied);
        assert_eq!(fused.chosen, c);
    }

    #[test]
    fn doc_mismatch_is_an_error() {
        let c = pred("d0", ModelSource::Generic, Location::Table(0), 1.0, -0.2);
        let t = pred("d1", ModelSource::Table, Location::Table(0), 1.0, -0.2);
        assert!(fuse(&c, &t, &FusionParams::generic_only()).is_err());
    }

    #[test]
    fn gate_monotonicity_in_gamma() {
        // Raising gamma never opens the gate on a doc it was closed for.
        let docs: Vec<(f64, f64)> = vec![(-0.01, 3.0), (-0.5, 2.0), (-2.0, 9.0), (-0.1, 1.0)];
        let mut prev_open: Option<Vec<bool>> = None;
        for gamma in [-3.0, -1.0, -0.25, -0.05, f64::INFINITY] {
            let fp = FusionParams { alpha: 1.0, beta: 5.0, gamma };
            let open: Vec<bool> = docs
                .iter()
                .enumerate()
                .map(|(i, &(kappa, g))| {
                    let c = pred(&format!("d{i}"), ModelSource::Generic, Location::Table(0), 0.1, -0.2);
                    let t = pred(&format!("d{i}"), ModelSource::Table, Location::Table(0), g, kappa);
                    fuse(&c, &t, &fp).unwrap().override_applied
                })
                .collect();
            if let Some(prev) = &prev_open {
                for (now, before) in open.iter().zip(prev) {
                    assert!(!(*now && !before), "override set grew as gamma rose");
                }
            }
            prev_open = Some(open);
        }
    }

    #[test]
    fn grid_spec_parses_inf() {
        let spec: GridSpec =
            serde_json::from_str(r#"{"alpha":[1.0],"beta":[0.0],"gamma":[-0.5,"inf"]}"#).unwrap();
        assert_eq!(spec.gamma.len(), 2);
        assert!(spec.gamma[1].is_infinite());
        let sidecar = serde_json::to_string(&FusionParams::generic_only()).unwrap();
        let back: FusionParams = serde_json::from_str(&sidecar).unwrap();
        assert!(back.gamma.is_infinite());
    }
}
