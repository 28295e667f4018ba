//! Table-textual context linking: exact lowercase n-gram matches of table
//! words in the article text, and the frozen-encoder context stacks those
//! matches produce for the text-aware head.

mod embed;
mod store;

pub use embed::embed_context;
pub use store::{load_stacks, save_stacks, DocStacks, TableStacks};

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Table};
use crate::error::{Error, Result};

/// Built-in English stop-word list (one word per line).
pub const DEFAULT_STOPWORDS: &str = include_str!("../../assets/stopwords_en.txt");

/// Maximum text matches kept per table word.
pub const MAX_MATCHES: usize = 6;

/// One exact n-gram match of a table expression in a paragraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramMatch {
    pub paragraph: usize,
    /// First matched word in the paragraph.
    pub start: usize,
    /// N-gram length, 1..=3.
    pub len: usize,
}

/// Matches per table word, indexed by the flattened table word index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchSet {
    pub per_word: Vec<Vec<NgramMatch>>,
}

/// Words too frequent to anchor a match on their own: the top 200 corpus
/// words plus a stop-word list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequentWordList {
    words: HashSet<String>,
}

impl FrequentWordList {
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        FrequentWordList {
            words: words.into_iter().map(|w| w.to_lowercase()).collect(),
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Top-200 corpus words by (frequency desc, lexicographic asc) unioned with
/// the stop-word file, one word per line.
pub fn build_frequent_words(
    corpus: &[Document],
    stopword_path: impl AsRef<Path>,
) -> Result<FrequentWordList> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot rank word frequencies of an empty corpus".into()));
    }
    let stopword_path = stopword_path.as_ref();
    let stopword_text = std::fs::read_to_string(stopword_path)
        .map_err(|e| Error::io(stopword_path.display().to_string(), e))?;
    Ok(build_frequent_words_from_text(corpus, &stopword_text))
}

/// Same as [`build_frequent_words`] with the stop-word text supplied
/// directly (e.g. [`DEFAULT_STOPWORDS`]).
pub fn build_frequent_words_from_text(corpus: &[Document], stopword_text: &str) -> FrequentWordList {
    let mut freq: HashMap<String, u64> = HashMap::new();
    let mut count = |w: &str| {
        *freq.entry(w.to_lowercase()).or_insert(0) += 1;
    };
    for doc in corpus {
        for w in &doc.question {
            count(w);
        }
        for para in &doc.paragraphs {
            for w in para {
                count(w);
            }
        }
        for table in &doc.tables {
            for w in table.words() {
                count(w);
            }
        }
    }
    let mut ranked: Vec<(&String, u64)> = freq.iter().map(|(w, f)| (w, *f)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut words: HashSet<String> = ranked.iter().take(200).map(|(w, _)| (*w).clone()).collect();
    for line in stopword_text.lines() {
        let w = line.trim().to_lowercase();
        if !w.is_empty() {
            words.insert(w);
        }
    }
    FrequentWordList { words }
}

/// Find up to six text matches per table word: trigrams first, then
/// bigrams, then unigrams, each scanned in document order. N-grams are
/// formed from consecutive words of one cell, and matched against
/// consecutive words of one paragraph; expressions made solely of frequent
/// words are skipped.
pub fn link(table: &Table, paragraphs: &[Vec<String>], freq: &FrequentWordList) -> MatchSet {
    let lowered_paras: Vec<Vec<String>> = paragraphs
        .iter()
        .map(|p| p.iter().map(|w| w.to_lowercase()).collect())
        .collect();

    let mut per_word = Vec::with_capacity(table.word_count());
    for row in &table.cells {
        for cell in row {
            let cell_lower: Vec<String> = cell.iter().map(|w| w.to_lowercase()).collect();
            for word_idx in 0..cell_lower.len() {
                per_word.push(matches_for_word(&cell_lower, word_idx, &lowered_paras, freq));
            }
        }
    }
    MatchSet { per_word }
}

fn matches_for_word(
    cell: &[String],
    word_idx: usize,
    paragraphs: &[Vec<String>],
    freq: &FrequentWordList,
) -> Vec<NgramMatch> {
    let mut matches: Vec<NgramMatch> = Vec::new();
    // A higher-tier match subsumes the lower-tier matches at the same text
    // location; each of the 6 slots holds a distinct location.
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    for n in (1..=3usize).rev() {
        if matches.len() >= MAX_MATCHES {
            break;
        }
        if word_idx + n > cell.len() {
            continue;
        }
        let expr = &cell[word_idx..word_idx + n];
        if expr.iter().all(|w| freq.contains(w)) {
            continue;
        }
        for (p, para) in paragraphs.iter().enumerate() {
            if matches.len() >= MAX_MATCHES {
                break;
            }
            if para.len() < n {
                continue;
            }
            for start in 0..=para.len() - n {
                if &para[start..start + n] == expr && seen.insert((p, start)) {
                    matches.push(NgramMatch { paragraph: p, start, len: n });
                    if matches.len() >= MAX_MATCHES {
                        break;
                    }
                }
            }
        }
    }
    matches
}

/// Render a match set as the JSONL fixture format:
/// `{"table_word_pos": .., "matches": [{"para": .., "start": .., "len": ..}]}`.
pub fn dump_matches(matches: &MatchSet) -> String {
    #[derive(Serialize)]
    struct Entry {
        para: usize,
        start: usize,
        len: usize,
    }
    #[derive(Serialize)]
    struct Line {
        table_word_pos: usize,
        matches: Vec<Entry>,
    }
    let mut out = String::new();
    for (pos, ms) in matches.per_word.iter().enumerate() {
        let line = Line {
            table_word_pos: pos,
            matches: ms
                .iter()
                .map(|m| Entry { para: m.paragraph, start: m.start, len: m.len })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("serializable"));
        out.push('\n');
    }
    out
}
