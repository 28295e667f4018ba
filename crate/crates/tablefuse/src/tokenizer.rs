//! Deterministic subword vocabulary and greedy longest-match tokenization.
//!
//! The vocabulary is built from the corpus itself: specials first, then every
//! observed character in initial and `##`-continuation form (so tokenization
//! never fails structurally), then whole words ranked by frequency. Greedy
//! longest-prefix matching with `##` continuations mirrors the WordPiece
//! scheme the encoder expects.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::Document;
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub type PieceId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<String>,
    piece_to_id: HashMap<String, PieceId>,
    pub pad: PieceId,
    pub unk: PieceId,
    pub cls: PieceId,
    pub sep: PieceId,
    pub mask: PieceId,
}

/// A word with the subword pieces it tokenizes to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedWord {
    pub word: String,
    pub piece_ids: Vec<PieceId>,
}

impl Vocab {
    fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        let mut piece_to_id = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if piece_to_id.insert(p.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocab piece {p:?}")));
            }
        }
        let id_of = |name: &str| -> Result<PieceId> {
            piece_to_id
                .get(name)
                .copied()
                .ok_or_else(|| Error::Format(format!("vocab missing special {name}")))
        };
        Ok(Vocab {
            pad: id_of(PAD)?,
            unk: id_of(UNK)?,
            cls: id_of(CLS)?,
            sep: id_of(SEP)?,
            mask: id_of(MASK)?,
            pieces,
            piece_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, id: PieceId) -> Option<&str> {
        self.pieces.get(id).map(|s| s.as_str())
    }

    pub fn id_of(&self, piece: &str) -> Option<PieceId> {
        self.piece_to_id.get(piece).copied()
    }

    pub fn is_special(&self, id: PieceId) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }

    /// One piece per line, line number = id; specials occupy the fixed
    /// header block at the top.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for p in &self.pieces {
            let _ = writeln!(out, "{p}");
        }
        std::fs::write(path.as_ref(), out)
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        let pieces: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        Vocab::from_pieces(pieces)
    }
}

/// Build a vocabulary from a corpus: specials, all observed characters in
/// both initial and continuation form, then whole words by
/// (frequency desc, lexicographic asc) until `max_size`.
pub fn build_vocab(corpus: &[Document], max_size: usize) -> Result<Vocab> {
    let mut word_freq: HashMap<String, u64> = HashMap::new();
    let mut observe = |word: &str| {
        let lower = word.to_lowercase();
        if !lower.is_empty() {
            *word_freq.entry(lower).or_insert(0) += 1;
        }
    };
    for doc in corpus {
        for w in &doc.question {
            observe(w);
        }
        for para in &doc.paragraphs {
            for w in para {
                observe(w);
            }
        }
        for table in &doc.tables {
            for row in &table.cells {
                for cell in row {
                    for w in cell {
                        observe(w);
                    }
                }
            }
        }
    }
    if word_freq.is_empty() {
        return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
    }

    let mut chars: Vec<char> = word_freq
        .keys()
        .flat_map(|w| w.chars())
        .collect::<std::collections::BTreeSet<char>>()
        .into_iter()
        .collect();
    chars.sort_unstable();

    let floor = SPECIALS.len() + 2 * chars.len();
    if max_size <= floor {
        return Err(Error::Config(format!(
            "max_size {max_size} must exceed specials + character pieces = {floor}"
        )));
    }

    let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    for &c in &chars {
        pieces.push(c.to_string());
    }
    for &c in &chars {
        pieces.push(format!("##{c}"));
    }

    let single_chars: std::collections::HashSet<String> =
        chars.iter().map(|c| c.to_string()).collect();
    let mut ranked: Vec<(&String, u64)> = word_freq
        .iter()
        .filter(|(w, _)| !single_chars.contains(*w))
        .map(|(w, f)| (w, *f))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    for (word, _) in ranked {
        if pieces.len() >= max_size {
            break;
        }
        pieces.push(word.clone());
    }

    Vocab::from_pieces(pieces)
}

/// Greedy longest-prefix tokenization of a single lowercased word.
/// Continuation pieces are matched with the `##` prefix; if no piece matches
/// at some offset, the rest of the word becomes a single `[UNK]`.
pub fn tokenize(word: &str, vocab: &Vocab) -> TokenizedWord {
    assert!(!word.is_empty(), "tokenize requires a non-empty word");
    let lower = word.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut ids = Vec::new();
    let mut pos = 0;
    while pos < chars.len() {
        let mut best: Option<(usize, PieceId)> = None;
        let mut candidate = if pos == 0 { String::new() } else { "##".to_string() };
        for (k, &c) in chars[pos..].iter().enumerate() {
            candidate.push(c);
            // Specials are uppercase-bracketed and input is lowercased, so a
            // candidate can never alias one.
            if let Some(id) = vocab.id_of(&candidate) {
                best = Some((k + 1, id));
            }
        }
        match best {
            Some((consumed, id)) => {
                ids.push(id);
                pos += consumed;
            }
            None => {
                // Unmatched residue collapses to a single [UNK].
                ids.push(vocab.unk);
                break;
            }
        }
    }
    TokenizedWord {
        word: word.to_string(),
        piece_ids: ids,
    }
}

/// Rebuild the lowercased word from pieces; `None` if any piece is a special.
pub fn detokenize(piece_ids: &[PieceId], vocab: &Vocab) -> Option<String> {
    let mut out = String::new();
    for &id in piece_ids {
        if vocab.is_special(id) {
            return None;
        }
        let piece = vocab.piece(id)?;
        out.push_str(piece.strip_prefix("##").unwrap_or(piece));
    }
    Some(out)
}
