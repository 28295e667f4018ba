//! Corpus data model: documents pairing a question with article text, tables
//! and gold annotations, plus JSONL ingestion, synthetic generation, dataset
//! splitting and training-instance sampling.

mod jsonl;
mod sampling;
mod split;
mod synth;

pub use jsonl::{load_corpus, save_corpus};
pub use sampling::{
    enumerate_windows, window_contains,
    sample_training_instances, sample_training_instances_filtered, DatasetFilter, InstanceClass,
    SamplingStrategy, StrategyName, TrainingInstance, Window, WindowSpec,
};
pub use split::split_corpus;
pub use synth::{generate_synthetic, SynthConfig, SynthFlavor, PROBE_FILLERS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One question paired with the article content it is asked against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    /// Question as a word sequence.
    pub question: Vec<String>,
    /// Article paragraphs, each a word sequence.
    pub paragraphs: Vec<Vec<String>>,
    pub tables: Vec<Table>,
    /// Gold annotations, at most five (NQ-style 5-way annotation).
    pub annotations: Vec<Annotation>,
}

/// A rectangular table. Cells hold word sequences; the first
/// `header_row_count` rows are column headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub id: String,
    pub n_rows: usize,
    pub n_cols: usize,
    pub header_row_count: usize,
    /// `cells[row][col]` is the word sequence of one cell.
    pub cells: Vec<Vec<Vec<String>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationKind {
    Short,
    Long,
    Null,
}

/// Which segment of a document an annotation (or prediction) points into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Location {
    /// Paragraph index.
    Text(usize),
    /// Table index.
    Table(usize),
}

/// A gold answer annotation. Spans index into the located segment's word
/// sequence; table words are flattened in row-major cell order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub kind: AnnotationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<Location>,
    /// Inclusive word range.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_string: Option<String>,
}

impl Table {
    /// Total number of words across all cells (row-major cell order).
    pub fn word_count(&self) -> usize {
        self.cells
            .iter()
            .flat_map(|row| row.iter())
            .map(|cell| cell.len())
            .sum()
    }

    /// Flattened word sequence in row-major cell order.
    pub fn words(&self) -> Vec<&str> {
        self.cells
            .iter()
            .flat_map(|row| row.iter())
            .flat_map(|cell| cell.iter())
            .map(|w| w.as_str())
            .collect()
    }

    /// Start index and length of a cell's words in the flattened sequence.
    pub fn cell_word_range(&self, row: usize, col: usize) -> (usize, usize) {
        let mut start = 0;
        for r in 0..self.n_rows {
            for c in 0..self.n_cols {
                if (r, c) == (row, col) {
                    return (start, self.cells[r][c].len());
                }
                start += self.cells[r][c].len();
            }
        }
        (start, 0)
    }

    /// Map a flattened word index to `(row, col, word_within_cell)`.
    pub fn cell_of_word(&self, word_idx: usize) -> Option<(usize, usize, usize)> {
        let mut start = 0;
        for r in 0..self.n_rows {
            for c in 0..self.n_cols {
                let len = self.cells[r][c].len();
                if word_idx < start + len {
                    return Some((r, c, word_idx - start));
                }
                start += len;
            }
        }
        None
    }

    /// First word index of each body row (rows past the header block).
    pub fn body_rows(&self) -> std::ops::Range<usize> {
        self.header_row_count..self.n_rows
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(Error::Validation {
                id: self.id.clone(),
                message: "table dimensions must be positive".into(),
            });
        }
        if self.header_row_count >= self.n_rows {
            return Err(Error::Validation {
                id: self.id.clone(),
                message: format!(
                    "header_row_count {} must be < n_rows {}",
                    self.header_row_count, self.n_rows
                ),
            });
        }
        if self.cells.len() != self.n_rows {
            return Err(Error::Validation {
                id: self.id.clone(),
                message: format!("expected {} rows, found {}", self.n_rows, self.cells.len()),
            });
        }
        for (r, row) in self.cells.iter().enumerate() {
            if row.len() != self.n_cols {
                return Err(Error::Validation {
                    id: self.id.clone(),
                    message: format!(
                        "row {} has {} cells, expected {} (grid must be rectangular)",
                        r,
                        row.len(),
                        self.n_cols
                    ),
                });
            }
        }
        Ok(())
    }
}

impl Annotation {
    pub fn is_short(&self) -> bool {
        self.kind == AnnotationKind::Short
    }

    /// Location and span, present for short and long annotations.
    pub fn located_span(&self) -> Option<(Location, (usize, usize))> {
        match (self.location, self.span) {
            (Some(loc), Some(span)) => Some((loc, span)),
            _ => None,
        }
    }
}

impl Document {
    /// Word sequence of a located segment.
    pub fn segment_words(&self, loc: Location) -> Option<Vec<&str>> {
        match loc {
            Location::Text(p) => self
                .paragraphs
                .get(p)
                .map(|para| para.iter().map(|w| w.as_str()).collect()),
            Location::Table(t) => self.tables.get(t).map(|tab| tab.words()),
        }
    }

    /// True if the document has at least one short answer in a table.
    /// This is the "positive article" notion used by negative sampling.
    pub fn has_table_short_answer(&self) -> bool {
        self.annotations.iter().any(|a| {
            a.is_short() && matches!(a.location, Some(Location::Table(_)))
        })
    }

    /// True if the document has any short answer at all.
    pub fn has_short_answer(&self) -> bool {
        self.annotations.iter().any(|a| a.is_short() && a.located_span().is_some())
    }

    pub fn validate(&self) -> Result<()> {
        if self.annotations.len() > 5 {
            return Err(Error::Validation {
                id: self.id.clone(),
                message: format!("{} annotations, at most 5 allowed", self.annotations.len()),
            });
        }
        for table in &self.tables {
            table.validate()?;
        }
        for (i, ann) in self.annotations.iter().enumerate() {
            self.validate_annotation(i, ann)?;
        }
        Ok(())
    }

    fn validate_annotation(&self, idx: usize, ann: &Annotation) -> Result<()> {
        let fail = |message: String| {
            Err(Error::Validation {
                id: self.id.clone(),
                message: format!("annotation {idx}: {message}"),
            })
        };
        match ann.kind {
            AnnotationKind::Null => Ok(()),
            AnnotationKind::Short | AnnotationKind::Long => {
                let Some(loc) = ann.location else {
                    return fail("missing location".into());
                };
                let Some(words) = self.segment_words(loc) else {
                    return fail(format!("location {loc:?} out of range"));
                };
                let Some((start, end)) = ann.span else {
                    if ann.kind == AnnotationKind::Long {
                        return Ok(()); // long answer = the whole segment
                    }
                    return fail("short annotation missing span".into());
                };
                if start > end || end >= words.len() {
                    return fail(format!(
                        "span ({start}, {end}) outside segment of {} words",
                        words.len()
                    ));
                }
                if ann.kind == AnnotationKind::Short {
                    let expected = words[start..=end].join(" ");
                    match &ann.answer_string {
                        Some(s) if *s == expected => Ok(()),
                        Some(s) => fail(format!(
                            "answer_string {s:?} does not match covered words {expected:?}"
                        )),
                        None => fail("short annotation missing answer_string".into()),
                    }
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Validate a whole corpus: per-document invariants plus id uniqueness.
pub fn validate_corpus(docs: &[Document]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for doc in docs {
        doc.validate()?;
        if !seen.insert(doc.id.as_str()) {
            return Err(Error::Validation {
                id: doc.id.clone(),
                message: "duplicate document id".into(),
            });
        }
    }
    Ok(())
}
