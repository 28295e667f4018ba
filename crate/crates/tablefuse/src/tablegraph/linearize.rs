//! Encoder input construction. Table inputs follow the `[SEP]` cell-boundary
//! scheme: `[CLS] question [SEP] cell [SEP] cell [SEP] ...` with header rows
//! first, truncation only at whole-cell boundaries. Plain word sequences
//! (paragraphs, or tables treated as running text by the generic model) get
//! `[CLS] question [SEP] words [SEP]`.

use crate::corpus::Table;
use crate::error::{Error, Result};
use crate::tokenizer::{tokenize, PieceId, Vocab};

/// Where an input position came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// `[CLS]` or `[SEP]`.
    Special,
    Question { word_idx: usize, piece_idx: usize },
    /// A table cell token: row, column, word within the cell, piece within
    /// the word.
    Cell { row: usize, col: usize, word_idx: usize, piece_idx: usize },
    /// A running-text token; `word_idx` is absolute within the segment.
    Text { word_idx: usize, piece_idx: usize },
}

impl Origin {
    pub fn is_special(&self) -> bool {
        matches!(self, Origin::Special)
    }

    /// True for positions a predicted answer span may cover.
    pub fn answer_eligible(&self) -> bool {
        matches!(self, Origin::Cell { .. } | Origin::Text { .. })
    }
}

/// A tokenized encoder input with its position-to-source map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearizedInput {
    pub piece_ids: Vec<PieceId>,
    pub segment_map: Vec<Origin>,
    /// Id of the linearized table; word-sequence inputs carry the segment
    /// label of their source instead.
    pub table_id: String,
}

impl LinearizedInput {
    pub fn len(&self) -> usize {
        self.piece_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.piece_ids.is_empty()
    }

    /// True if positions `s..=e` form one answer unit: all eligible and not
    /// crossing a `[SEP]` (cells are atomic answer units).
    pub fn span_within_unit(&self, s: usize, e: usize) -> bool {
        s <= e
            && e < self.len()
            && (s..=e).all(|p| self.segment_map[p].answer_eligible())
    }

    /// Inclusive word range covered by positions `s..=e`, if they all map to
    /// the same segment kind. Returns `(first_word, last_word)` where table
    /// words use the flattened row-major index.
    pub fn word_span(&self, table: Option<&Table>, s: usize, e: usize) -> Option<(usize, usize)> {
        Some((self.word_at(table, s)?, self.word_at(table, e)?))
    }

    /// Segment word index of one position (flattened row-major for tables).
    pub fn word_at(&self, table: Option<&Table>, p: usize) -> Option<usize> {
        match self.segment_map[p] {
            Origin::Text { word_idx, .. } => Some(word_idx),
            Origin::Cell { row, col, word_idx, .. } => {
                let t = table?;
                let (start, _) = t.cell_word_range(row, col);
                Some(start + word_idx)
            }
            _ => None,
        }
    }

    /// Piece positions covering an inclusive segment word span: the first
    /// piece of the first word through the last piece of the last word.
    /// `None` if either end fell out of the window.
    pub fn positions_of_word_span(
        &self,
        table: Option<&Table>,
        span: (usize, usize),
    ) -> Option<(usize, usize)> {
        let mut first = None;
        let mut last = None;
        for p in 0..self.len() {
            match self.word_at(table, p) {
                Some(w) if w == span.0 && first.is_none() => first = Some(p),
                _ => {}
            }
            if self.word_at(table, p) == Some(span.1) {
                last = Some(p);
            }
        }
        match (first, last) {
            (Some(f), Some(l)) if f <= l => Some((f, l)),
            _ => None,
        }
    }
}

/// Linearize a question and one table row-window. Header rows are always
/// included; body rows come from the inclusive `row_window`. Every cell is
/// followed by `[SEP]`; cells that would overflow `max_seq` are dropped
/// whole, along with everything after them.
pub fn linearize(
    question: &[String],
    table: &Table,
    vocab: &Vocab,
    max_seq: usize,
    row_window: (usize, usize),
) -> Result<LinearizedInput> {
    let (row_first, row_last) = row_window;
    if row_first < table.header_row_count && table.header_row_count > 0 {
        return Err(Error::Input(format!(
            "row window ({row_first}, {row_last}) starts inside the header block"
        )));
    }
    if row_last >= table.n_rows || row_first > row_last {
        return Err(Error::Input(format!(
            "row window ({row_first}, {row_last}) outside table with {} rows",
            table.n_rows
        )));
    }

    let mut piece_ids = vec![vocab.cls];
    let mut segment_map = vec![Origin::Special];
    push_question(question, vocab, max_seq, &mut piece_ids, &mut segment_map)?;

    let rows: Vec<usize> = (0..table.header_row_count)
        .chain(row_first..=row_last)
        .collect();
    'rows: for &r in &rows {
        for c in 0..table.n_cols {
            let cell = &table.cells[r][c];
            let mut cell_pieces = Vec::new();
            for (w, word) in cell.iter().enumerate() {
                for (p, &id) in tokenize(word, vocab).piece_ids.iter().enumerate() {
                    cell_pieces.push((id, Origin::Cell { row: r, col: c, word_idx: w, piece_idx: p }));
                }
            }
            if piece_ids.len() + cell_pieces.len() + 1 > max_seq {
                break 'rows;
            }
            for (id, origin) in cell_pieces {
                piece_ids.push(id);
                segment_map.push(origin);
            }
            piece_ids.push(vocab.sep);
            segment_map.push(Origin::Special);
        }
    }

    Ok(LinearizedInput {
        piece_ids,
        segment_map,
        table_id: table.id.clone(),
    })
}

/// Linearize a question and a plain word sequence (a paragraph, or a table
/// flattened to text). `word_window` is inclusive and absolute within the
/// sequence; truncation happens at whole-word boundaries. One trailing
/// `[SEP]` closes the input.
pub fn linearize_words(
    question: &[String],
    words: &[String],
    vocab: &Vocab,
    max_seq: usize,
    word_window: (usize, usize),
    segment_label: &str,
) -> Result<LinearizedInput> {
    let (first, last) = word_window;
    if last >= words.len() || first > last {
        return Err(Error::Input(format!(
            "word window ({first}, {last}) outside sequence of {} words",
            words.len()
        )));
    }
    let mut piece_ids = vec![vocab.cls];
    let mut segment_map = vec![Origin::Special];
    push_question(question, vocab, max_seq, &mut piece_ids, &mut segment_map)?;

    #[allow(clippy::needless_range_loop)] // w is the absolute word index recorded in origins
    for w in first..=last {
        let pieces = tokenize(&words[w], vocab).piece_ids;
        if piece_ids.len() + pieces.len() + 1 > max_seq {
            break;
        }
        for (p, &id) in pieces.iter().enumerate() {
            piece_ids.push(id);
            segment_map.push(Origin::Text { word_idx: w, piece_idx: p });
        }
    }
    piece_ids.push(vocab.sep);
    segment_map.push(Origin::Special);

    Ok(LinearizedInput {
        piece_ids,
        segment_map,
        table_id: segment_label.to_string(),
    })
}

fn push_question(
    question: &[String],
    vocab: &Vocab,
    max_seq: usize,
    piece_ids: &mut Vec<PieceId>,
    segment_map: &mut Vec<Origin>,
) -> Result<()> {
    for (w, word) in question.iter().enumerate() {
        for (p, &id) in tokenize(word, vocab).piece_ids.iter().enumerate() {
            piece_ids.push(id);
            segment_map.push(Origin::Question { word_idx: w, piece_idx: p });
        }
    }
    if piece_ids.len() + 1 > max_seq {
        return Err(Error::Input(format!(
            "question alone takes {} pieces, exceeding max_seq {max_seq}",
            piece_ids.len()
        )));
    }
    piece_ids.push(vocab.sep);
    segment_map.push(Origin::Special);
    Ok(())
}
