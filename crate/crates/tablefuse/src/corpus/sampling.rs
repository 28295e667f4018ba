//! Training-instance sampling: positive windows plus the three negative
//! sampling strategies (within positive articles, random across all
//! articles, balanced within/across).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{Document, Location};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    WithinPositive,
    RandomAll,
    EqualWithinAcross,
    Custom,
}

/// How negatives are drawn, as `pos : neg_within : neg_outside` ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingStrategy {
    pub name: StrategyName,
    pub ratios: (f64, f64, f64),
}

impl SamplingStrategy {
    /// Equal sampling within positive articles, `(1:1:0)`.
    pub fn within_positive() -> Self {
        SamplingStrategy {
            name: StrategyName::WithinPositive,
            ratios: (1.0, 1.0, 0.0),
        }
    }

    /// Random sampling across all articles, `(0.63:0.28:0.72)`.
    pub fn random_all() -> Self {
        SamplingStrategy {
            name: StrategyName::RandomAll,
            ratios: (0.63, 0.28, 0.72),
        }
    }

    /// Equal sampling within and across articles, `(2:1:1)`.
    pub fn equal_within_across() -> Self {
        SamplingStrategy {
            name: StrategyName::EqualWithinAcross,
            ratios: (2.0, 1.0, 1.0),
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "within_positive" => Ok(Self::within_positive()),
            "random_all" => Ok(Self::random_all()),
            "equal_within_across" => Ok(Self::equal_within_across()),
            other => Err(Error::Config(format!("unknown sampling strategy {other:?}"))),
        }
    }

    fn validate(&self) -> Result<()> {
        let (p, w, o) = self.ratios;
        if p <= 0.0 || w < 0.0 || o < 0.0 {
            return Err(Error::Config(format!(
                "sampling ratios must be non-negative with pos > 0, got {:?}",
                self.ratios
            )));
        }
        let preset = match self.name {
            StrategyName::WithinPositive => Some(Self::within_positive().ratios),
            StrategyName::RandomAll => Some(Self::random_all().ratios),
            StrategyName::EqualWithinAcross => Some(Self::equal_within_across().ratios),
            StrategyName::Custom => None,
        };
        if let Some(expected) = preset {
            if self.ratios != expected {
                return Err(Error::Config(format!(
                    "strategy {:?} must use its preset ratios {expected:?}, got {:?}",
                    self.name, self.ratios
                )));
            }
        }
        Ok(())
    }
}

/// Which document segments contribute training windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFilter {
    /// All documents, text and table windows.
    #[default]
    Full,
    /// Only documents with a short table answer, table windows only.
    TablesOnly,
}

/// A contiguous word window over one segment of a document. Table windows
/// always include the header rows; `row_range` is the inclusive body-row
/// span, and `word_range` the inclusive flattened word span it covers
/// (headers included).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub segment: Location,
    pub row_range: Option<(usize, usize)>,
    pub word_range: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceClass {
    Positive,
    NegWithin,
    NegOutside,
}

/// One training window: a document, a window into it, and the gold word
/// span (absolute within the segment) or `None` for a negative.
#[derive(Debug, Clone)]
pub struct TrainingInstance {
    pub doc_idx: usize,
    pub window: Window,
    pub label: Option<(usize, usize)>,
    pub class: InstanceClass,
}

/// Word budget used when cutting windows. The linearizer applies the real
/// sub-word cap later; this keeps windows comfortably under it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WindowSpec {
    pub max_words: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { max_words: 180 }
    }
}

/// Enumerate candidate windows of one document, paragraphs first then
/// tables, each in index order.
pub fn enumerate_windows(doc: &Document, filter: DatasetFilter, spec: WindowSpec) -> Vec<Window> {
    let mut windows = Vec::new();
    if filter == DatasetFilter::Full {
        for (p, para) in doc.paragraphs.iter().enumerate() {
            if para.is_empty() {
                continue;
            }
            if para.len() <= spec.max_words {
                windows.push(Window {
                    segment: Location::Text(p),
                    row_range: None,
                    word_range: (0, para.len() - 1),
                });
            } else {
                let w = spec.max_words;
                let stride = (w / 2).max(1);
                let mut start = 0;
                loop {
                    let end = (start + w - 1).min(para.len() - 1);
                    windows.push(Window {
                        segment: Location::Text(p),
                        row_range: None,
                        word_range: (start, end),
                    });
                    if end + 1 >= para.len() {
                        break;
                    }
                    start += stride;
                }
            }
        }
    }
    for (t, table) in doc.tables.iter().enumerate() {
        let header_words: usize = (0..table.header_row_count)
            .map(|r| (0..table.n_cols).map(|c| table.cells[r][c].len()).sum::<usize>())
            .sum();
        let body_first = table.header_row_count;
        let body_last = table.n_rows - 1;
        let total = table.word_count();
        if total <= spec.max_words {
            windows.push(Window {
                segment: Location::Table(t),
                row_range: Some((body_first, body_last)),
                word_range: (0, total - 1),
            });
            continue;
        }
        // Slide over body rows: the widest row count whose every window
        // stays within budget, half-overlapping.
        let row_words: Vec<usize> = (body_first..=body_last)
            .map(|r| (0..table.n_cols).map(|c| table.cells[r][c].len()).sum())
            .collect();
        let n_body = row_words.len();
        let fits = |a: usize, b: usize| {
            header_words + row_words[a..=b].iter().sum::<usize>() <= spec.max_words
        };
        let mut width = n_body;
        while width > 1 && !(0..=n_body - width).all(|s| fits(s, s + width - 1)) {
            width -= 1;
        }
        let stride = (width / 2).max(1);
        let mut s = 0;
        loop {
            let e = (s + width - 1).min(n_body - 1);
            let rows = (body_first + s, body_first + e);
            // Body rows are contiguous in the flattened order; word_range is
            // the covered body span (headers are an implicit prefix).
            let body_start = header_words + row_words[..s].iter().sum::<usize>();
            let body_end = header_words + row_words[..=e].iter().sum::<usize>();
            windows.push(Window {
                segment: Location::Table(t),
                row_range: Some(rows),
                word_range: (body_start, body_end.saturating_sub(1).max(body_start)),
            });
            if e + 1 >= n_body {
                break;
            }
            s += stride;
        }
    }
    windows
}

/// True if `window` fully contains the gold span `(loc, span)`.
pub fn window_contains(doc: &Document, window: &Window, loc: Location, span: (usize, usize)) -> bool {
    if window.segment != loc {
        return false;
    }
    match loc {
        Location::Text(_) => span.0 >= window.word_range.0 && span.1 <= window.word_range.1,
        Location::Table(t) => {
            let Some((row_first, row_last)) = window.row_range else {
                return false;
            };
            let table = &doc.tables[t];
            let inside = |w: usize| {
                let Some((r, _, _)) = table.cell_of_word(w) else { return false };
                r < table.header_row_count || (r >= row_first && r <= row_last)
            };
            inside(span.0) && inside(span.1)
        }
    }
}

fn window_intersects(doc: &Document, window: &Window, loc: Location, span: (usize, usize)) -> bool {
    if window.segment != loc {
        return false;
    }
    match loc {
        Location::Text(_) => span.0 <= window.word_range.1 && span.1 >= window.word_range.0,
        Location::Table(t) => {
            let Some((row_first, row_last)) = window.row_range else {
                return false;
            };
            let table = &doc.tables[t];
            (span.0..=span.1).any(|w| {
                table
                    .cell_of_word(w)
                    .map(|(r, _, _)| r < table.header_row_count || (r >= row_first && r <= row_last))
                    .unwrap_or(false)
            })
        }
    }
}

/// Sample with the default full-document filter and window budget.
pub fn sample_training_instances(
    corpus: &[Document],
    strategy: &SamplingStrategy,
    seed: u64,
) -> Result<Vec<TrainingInstance>> {
    sample_training_instances_filtered(corpus, DatasetFilter::Full, strategy, WindowSpec::default(), seed)
}

/// Sample positive and negative training windows. Realized class counts
/// track `strategy.ratios` scaled so every positive instance is used,
/// deviating by at most the rounding of one instance per class.
pub fn sample_training_instances_filtered(
    corpus: &[Document],
    filter: DatasetFilter,
    strategy: &SamplingStrategy,
    spec: WindowSpec,
    seed: u64,
) -> Result<Vec<TrainingInstance>> {
    strategy.validate()?;
    if corpus.is_empty() {
        return Err(Error::Sampling("corpus is empty".into()));
    }

    let mut positives = Vec::new();
    let mut neg_within_pool = Vec::new();
    let mut neg_outside_pool = Vec::new();

    for (doc_idx, doc) in corpus.iter().enumerate() {
        if filter == DatasetFilter::TablesOnly && !doc.has_table_short_answer() {
            continue;
        }
        let windows = enumerate_windows(doc, filter, spec);
        let golds: Vec<(Location, (usize, usize))> = doc
            .annotations
            .iter()
            .filter(|a| a.is_short())
            .filter_map(|a| a.located_span())
            .collect();
        let positive_article = doc.has_table_short_answer();

        let mut used = vec![false; windows.len()];
        for &(loc, span) in &golds {
            if let Some(w) = windows
                .iter()
                .position(|win| window_contains(doc, win, loc, span))
            {
                used[w] = true;
                positives.push(TrainingInstance {
                    doc_idx,
                    window: windows[w],
                    label: Some(span),
                    class: InstanceClass::Positive,
                });
            }
            // A gold span no window covers is dropped here; the training
            // loop reports a skip counter for spans lost to truncation.
        }
        for (w, win) in windows.iter().enumerate() {
            if used[w] {
                continue;
            }
            if golds.iter().any(|&(loc, span)| window_intersects(doc, win, loc, span)) {
                continue; // touching a gold span disqualifies a negative
            }
            let instance = TrainingInstance {
                doc_idx,
                window: *win,
                label: None,
                class: if positive_article {
                    InstanceClass::NegWithin
                } else {
                    InstanceClass::NegOutside
                },
            };
            if positive_article {
                neg_within_pool.push(instance);
            } else {
                neg_outside_pool.push(instance);
            }
        }
    }

    let np = positives.len();
    let (rp, rw, ro) = strategy.ratios;
    if np == 0 && (rw > 0.0 || ro > 0.0 || rp > 0.0) {
        return Err(Error::Sampling("no positive instances in corpus".into()));
    }
    let target_within = ((np as f64) * rw / rp).round() as usize;
    let target_outside = ((np as f64) * ro / rp).round() as usize;

    if target_within > neg_within_pool.len() {
        return Err(Error::Sampling(format!(
            "need {target_within} within-article negatives, only {} available",
            neg_within_pool.len()
        )));
    }
    if target_outside > neg_outside_pool.len() {
        return Err(Error::Sampling(format!(
            "need {target_outside} negatives from answerless articles, only {} available",
            neg_outside_pool.len()
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    neg_within_pool.shuffle(&mut rng);
    neg_outside_pool.shuffle(&mut rng);

    let mut out = positives;
    out.extend(neg_within_pool.into_iter().take(target_within));
    out.extend(neg_outside_pool.into_iter().take(target_outside));
    out.shuffle(&mut rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthConfig};

    fn counts(instances: &[TrainingInstance]) -> (usize, usize, usize) {
        let p = instances.iter().filter(|i| i.class == InstanceClass::Positive).count();
        let w = instances.iter().filter(|i| i.class == InstanceClass::NegWithin).count();
        let o = instances.iter().filter(|i| i.class == InstanceClass::NegOutside).count();
        (p, w, o)
    }

    fn corpus() -> Vec<Document> {
        generate_synthetic(
            &SynthConfig {
                n_docs: 60,
                no_answer_fraction: 0.3,
                table_answer_fraction: 0.7,
                ..SynthConfig::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn within_positive_matches_one_to_one() {
        let docs = corpus();
        let instances =
            sample_training_instances(&docs, &SamplingStrategy::within_positive(), 1).unwrap();
        let (p, w, o) = counts(&instances);
        assert_eq!(w, p);
        assert_eq!(o, 0);
        assert!(p > 0);
    }

    #[test]
    fn ratio_presets_are_respected_within_one() {
        let docs = corpus();
        for strategy in [
            SamplingStrategy::random_all(),
            SamplingStrategy::equal_within_across(),
        ] {
            let instances = sample_training_instances(&docs, &strategy, 2).unwrap();
            let (p, w, o) = counts(&instances);
            let (rp, rw, ro) = strategy.ratios;
            let expect_w = (p as f64) * rw / rp;
            let expect_o = (p as f64) * ro / rp;
            assert!((w as f64 - expect_w).abs() <= 1.0, "within: {w} vs {expect_w}");
            assert!((o as f64 - expect_o).abs() <= 1.0, "outside: {o} vs {expect_o}");
        }
    }

    #[test]
    fn outside_negatives_require_answerless_articles() {
        let docs = generate_synthetic(
            &SynthConfig {
                n_docs: 20,
                no_answer_fraction: 0.0,
                table_answer_fraction: 1.0,
                ..SynthConfig::default()
            },
            9,
        )
        .unwrap();
        let err = sample_training_instances(&docs, &SamplingStrategy::equal_within_across(), 1);
        assert!(matches!(err, Err(Error::Sampling(_))));
    }

    #[test]
    fn preset_names_must_keep_their_ratios() {
        let docs = corpus();
        let tampered = SamplingStrategy {
            name: StrategyName::WithinPositive,
            ratios: (2.0, 1.0, 1.0),
        };
        assert!(matches!(
            sample_training_instances(&docs, &tampered, 0),
            Err(Error::Config(_))
        ));
        let custom = SamplingStrategy {
            name: StrategyName::Custom,
            ratios: (2.0, 1.0, 0.0),
        };
        assert!(sample_training_instances(&docs, &custom, 0).is_ok());
    }

    #[test]
    fn sampling_is_deterministic() {
        let docs = corpus();
        let a = sample_training_instances(&docs, &SamplingStrategy::random_all(), 17).unwrap();
        let b = sample_training_instances(&docs, &SamplingStrategy::random_all(), 17).unwrap();
        let key = |i: &TrainingInstance| (i.doc_idx, i.window, i.label, i.class as u8);
        assert_eq!(a.iter().map(key).collect::<Vec<_>>(), b.iter().map(key).collect::<Vec<_>>());
    }

    #[test]
    fn negatives_never_touch_gold_spans() {
        let docs = corpus();
        let instances = sample_training_instances(&docs, &SamplingStrategy::random_all(), 3).unwrap();
        for inst in instances.iter().filter(|i| i.label.is_none()) {
            let doc = &docs[inst.doc_idx];
            for ann in doc.annotations.iter().filter(|a| a.is_short()) {
                if let Some((loc, span)) = ann.located_span() {
                    assert!(!window_intersects(doc, &inst.window, loc, span));
                }
            }
        }
    }
}
