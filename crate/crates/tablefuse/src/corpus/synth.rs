//! Synthetic corpus generation. Stands in for NQ-scale data so the whole
//! pipeline can be trained and evaluated at desk scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{Annotation, AnnotationKind, Document, Location, Table};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SynthFlavor {
    /// Random tables and paragraphs with answers in either modality.
    #[default]
    General,
    /// Two candidate cells per table; only the article text names the
    /// correct one. Built to probe whether context attention carries signal.
    ContextProbe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub flavor: SynthFlavor,
    /// Size of the synthetic word vocabulary.
    pub vocab_size: usize,
    pub n_paragraphs: usize,
    pub paragraph_len: usize,
    pub n_tables: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    /// Cells hold 1..=cell_words_max words.
    pub cell_words_max: usize,
    /// Fraction of answerable questions whose answer sits in a table.
    pub table_answer_fraction: f64,
    /// Fraction of table answers whose cell words are restated verbatim in a
    /// paragraph, so the table-text linker can fire on them.
    pub paraphrase_fraction: f64,
    /// Fraction of questions with no answer (zero annotations).
    pub no_answer_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 100,
            flavor: SynthFlavor::General,
            vocab_size: 600,
            n_paragraphs: 2,
            paragraph_len: 12,
            n_tables: 2,
            n_rows: 3,
            n_cols: 2,
            cell_words_max: 2,
            table_answer_fraction: 0.7,
            paraphrase_fraction: 0.5,
            no_answer_fraction: 0.1,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Config("synthetic vocabulary must be non-empty".into()));
        }
        if self.n_rows < 2 || self.n_cols == 0 {
            return Err(Error::Config(
                "tables need at least one header and one body row".into(),
            ));
        }
        for (name, f) in [
            ("table_answer_fraction", self.table_answer_fraction),
            ("paraphrase_fraction", self.paraphrase_fraction),
            ("no_answer_fraction", self.no_answer_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {f}")));
            }
        }
        Ok(())
    }
}

/// Deterministic pseudo-word for a vocabulary index: base-26 letters,
/// at least three characters.
pub fn synth_word(index: usize) -> String {
    let mut n = index;
    let mut letters = Vec::new();
    loop {
        letters.push(b'a' + (n % 26) as u8);
        n /= 26;
        if n == 0 {
            break;
        }
    }
    while letters.len() < 3 {
        letters.push(b'a');
    }
    letters.reverse();
    String::from_utf8(letters).expect("ascii letters")
}

const INTERROGATIVES: [&str; 5] = ["what", "which", "where", "when", "who"];

/// Generate a corpus. Byte-identical output for identical `(config, seed)`.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Vec<Document>> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let docs = match config.flavor {
        SynthFlavor::General => (0..config.n_docs)
            .map(|i| general_doc(config, i, &mut rng))
            .collect::<Vec<_>>(),
        SynthFlavor::ContextProbe => (0..config.n_docs)
            .map(|i| probe_doc(config, i, &mut rng))
            .collect::<Vec<_>>(),
    };
    super::validate_corpus(&docs)?;
    Ok(docs)
}

fn pick_word(config: &SynthConfig, rng: &mut ChaCha20Rng) -> String {
    synth_word(rng.gen_range(0..config.vocab_size))
}

fn general_doc(config: &SynthConfig, index: usize, rng: &mut ChaCha20Rng) -> Document {
    let id = format!("doc{index:05}");
    let tables: Vec<Table> = (0..config.n_tables)
        .map(|t| {
            let cells = (0..config.n_rows)
                .map(|_| {
                    (0..config.n_cols)
                        .map(|_| {
                            let len = rng.gen_range(1..=config.cell_words_max.max(1));
                            (0..len).map(|_| pick_word(config, rng)).collect()
                        })
                        .collect()
                })
                .collect();
            Table {
                id: format!("{id}-t{t}"),
                n_rows: config.n_rows,
                n_cols: config.n_cols,
                header_row_count: 1,
                cells,
            }
        })
        .collect();
    let mut paragraphs: Vec<Vec<String>> = (0..config.n_paragraphs)
        .map(|_| (0..config.paragraph_len).map(|_| pick_word(config, rng)).collect())
        .collect();

    let answerable = rng.gen::<f64>() >= config.no_answer_fraction;
    let mut question = vec![INTERROGATIVES[rng.gen_range(0..INTERROGATIVES.len())].to_string()];
    let mut annotations = Vec::new();

    if answerable {
        let in_table = rng.gen::<f64>() < config.table_answer_fraction && !tables.is_empty();
        if in_table {
            let t = rng.gen_range(0..tables.len());
            let table = &tables[t];
            let row = rng.gen_range(table.header_row_count..table.n_rows);
            let col = rng.gen_range(0..table.n_cols);
            let (start, len) = table.cell_word_range(row, col);
            let answer_words: Vec<String> = table.cells[row][col].clone();
            // Question names the row header and the answer column's header,
            // the usual "what is <row>'s <column>" shape.
            question.extend(table.cells[row][0].iter().cloned());
            question.extend(table.cells[0][col].iter().cloned());
            if rng.gen::<f64>() < config.paraphrase_fraction && !paragraphs.is_empty() {
                let p = rng.gen_range(0..paragraphs.len());
                let pos = rng.gen_range(0..=paragraphs[p].len());
                for (k, w) in answer_words.iter().enumerate() {
                    paragraphs[p].insert(pos + k, w.clone());
                }
            }
            annotations.push(Annotation {
                kind: AnnotationKind::Short,
                location: Some(Location::Table(t)),
                span: Some((start, start + len - 1)),
                answer_string: Some(answer_words.join(" ")),
            });
        } else {
            let p = rng.gen_range(0..paragraphs.len().max(1));
            let para_len = paragraphs[p].len();
            let span_len = rng.gen_range(1..=2.min(para_len));
            let start = rng.gen_range(0..=para_len - span_len);
            let end = start + span_len - 1;
            // Cloze-style question: the words around the answer.
            if start >= 2 {
                question.push(paragraphs[p][start - 2].clone());
                question.push(paragraphs[p][start - 1].clone());
            } else if end + 2 < para_len {
                question.push(paragraphs[p][end + 1].clone());
                question.push(paragraphs[p][end + 2].clone());
            } else {
                question.push(pick_word(config, rng));
            }
            annotations.push(Annotation {
                kind: AnnotationKind::Short,
                location: Some(Location::Text(p)),
                span: Some((start, end)),
                answer_string: Some(paragraphs[p][start..=end].join(" ")),
            });
        }
    } else {
        question.push(pick_word(config, rng));
        question.push(pick_word(config, rng));
    }

    Document {
        id,
        question,
        paragraphs,
        tables,
        annotations,
    }
}

/// Filler words of the probe flavor; every probe paragraph and question is
/// built from these plus entity words.
pub const PROBE_FILLERS: [&str; 8] = ["the", "item", "is", "today", "which", "one", "row", "holds"];

/// Number of low-index vocabulary words reserved as entity "kind" words.
const PROBE_KIND_WORDS: usize = 8;

fn probe_doc(config: &SynthConfig, index: usize, rng: &mut ChaCha20Rng) -> Document {
    let id = format!("probe{index:05}");
    // Two-word entities: a kind word from a small pool and a near-unique id
    // word from the rest of the vocabulary.
    let entity = |rng: &mut ChaCha20Rng| -> Vec<String> {
        let kind = synth_word(rng.gen_range(0..PROBE_KIND_WORDS.min(config.vocab_size)));
        let ident = synth_word(rng.gen_range(PROBE_KIND_WORDS.min(config.vocab_size)..config.vocab_size.max(PROBE_KIND_WORDS + 1)));
        vec![kind, ident]
    };
    let cell_a = entity(rng);
    let mut cell_b = entity(rng);
    while cell_b[1] == cell_a[1] {
        cell_b = entity(rng);
    }
    let correct_row = if rng.gen::<bool>() { 1 } else { 2 };

    let table = Table {
        id: format!("{id}-t0"),
        n_rows: 3,
        n_cols: 1,
        header_row_count: 1,
        cells: vec![
            vec![vec!["item".to_string()]],
            vec![cell_a.clone()],
            vec![cell_b.clone()],
        ],
    };
    let correct_words = if correct_row == 1 { &cell_a } else { &cell_b };
    let paragraph: Vec<String> = ["the", "item", "is"]
        .iter()
        .map(|w| w.to_string())
        .chain(correct_words.iter().cloned())
        .chain(std::iter::once("today".to_string()))
        .collect();

    let (start, len) = table.cell_word_range(correct_row, 0);
    Document {
        id,
        question: vec!["which".into(), "item".into()],
        paragraphs: vec![paragraph],
        tables: vec![table],
        annotations: vec![Annotation {
            kind: AnnotationKind::Short,
            location: Some(Location::Table(0)),
            span: Some((start, start + len - 1)),
            answer_string: Some(correct_words.join(" ")),
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_byte_identical() {
        let config = SynthConfig {
            n_docs: 20,
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&config, 7).unwrap();
        let b = generate_synthetic(&config, 7).unwrap();
        assert_eq!(a, b);
        let lines_a: Vec<String> = a.iter().map(|d| serde_json::to_string(d).unwrap()).collect();
        let lines_b: Vec<String> = b.iter().map(|d| serde_json::to_string(d).unwrap()).collect();
        assert_eq!(lines_a, lines_b);
    }

    #[test]
    fn table_answer_fraction_one_puts_all_answers_in_tables() {
        let config = SynthConfig {
            n_docs: 40,
            table_answer_fraction: 1.0,
            no_answer_fraction: 0.0,
            ..SynthConfig::default()
        };
        let docs = generate_synthetic(&config, 3).unwrap();
        for doc in &docs {
            assert_eq!(doc.annotations.len(), 1);
            assert!(matches!(doc.annotations[0].location, Some(Location::Table(_))));
        }
    }

    #[test]
    fn zero_vocabulary_is_a_config_error() {
        let config = SynthConfig {
            vocab_size: 0,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&config, 0), Err(Error::Config(_))));
    }

    #[test]
    fn probe_docs_name_the_correct_cell_in_text() {
        let config = SynthConfig {
            n_docs: 30,
            flavor: SynthFlavor::ContextProbe,
            vocab_size: 4000,
            ..SynthConfig::default()
        };
        let docs = generate_synthetic(&config, 11).unwrap();
        for doc in &docs {
            let ann = &doc.annotations[0];
            let answer = ann.answer_string.as_deref().unwrap();
            let para = doc.paragraphs[0].join(" ");
            assert!(
                para.contains(answer),
                "paragraph {para:?} must restate the answer {answer:?}"
            );
        }
        // Both body rows occur as the correct one across the corpus.
        let rows: std::collections::HashSet<usize> = docs
            .iter()
            .map(|d| {
                let (start, _) = d.annotations[0].span.unwrap();
                d.tables[0].cell_of_word(start).unwrap().0
            })
            .collect();
        assert_eq!(rows.len(), 2);
    }
}
