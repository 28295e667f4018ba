//! Context stacks: run the frozen text encoder over the host paragraphs and
//! stack the last-layer vectors of each table word's matched expressions,
//! truncated or zero-padded to the configured row count.

use crate::encoder::{run_forward, ContextStack, EncoderParams, Head};
use crate::error::{Error, Result};
use crate::tablegraph::{linearize_words, Origin};
use crate::tokenizer::Vocab;

use super::MatchSet;

/// Embed the matched context of every table word. `frozen_encoder` must be
/// a text-mode model (no context layers); its last hidden layer supplies
/// the rows. Rows beyond `context_rows` are pruned in match order, missing
/// rows are zero-padded with an invalid mask.
pub fn embed_context(
    matches: &MatchSet,
    paragraphs: &[Vec<String>],
    frozen_encoder: &EncoderParams,
    vocab: &Vocab,
) -> Result<Vec<ContextStack>> {
    let cfg = &frozen_encoder.config;
    if cfg.has_context() {
        return Err(Error::Consistency(
            "the context embedder needs a text-mode encoder without context layers".into(),
        ));
    }
    let r = cfg.context_rows;
    let d = cfg.d_model();

    // Last-layer vectors per (paragraph, word, piece), computed lazily per
    // paragraph and shared across table words.
    let mut para_cache: Vec<Option<ParagraphVectors>> =
        (0..paragraphs.len()).map(|_| None).collect();

    let mut out = Vec::with_capacity(matches.per_word.len());
    for word_matches in &matches.per_word {
        let mut stack = ContextStack::empty(r, d);
        let mut next_row = 0;
        'matches: for m in word_matches {
            if next_row >= r {
                break;
            }
            if para_cache[m.paragraph].is_none() {
                para_cache[m.paragraph] =
                    Some(embed_paragraph(&paragraphs[m.paragraph], frozen_encoder, vocab)?);
            }
            let vectors = para_cache[m.paragraph].as_ref().expect("just filled");
            for word in m.start..m.start + m.len {
                for piece_vec in vectors.pieces_of(word) {
                    if next_row >= r {
                        break 'matches;
                    }
                    stack
                        .rows
                        .data_mut()[next_row * d..(next_row + 1) * d]
                        .copy_from_slice(piece_vec);
                    stack.valid[next_row] = true;
                    next_row += 1;
                }
            }
        }
        out.push(stack);
    }
    Ok(out)
}

/// Last-layer vectors of one paragraph, keyed by word index.
struct ParagraphVectors {
    /// (word_idx, vector) in position order.
    rows: Vec<(usize, Vec<f64>)>,
}

impl ParagraphVectors {
    fn pieces_of(&self, word: usize) -> impl Iterator<Item = &[f64]> {
        self.rows
            .iter()
            .filter(move |(w, _)| *w == word)
            .map(|(_, v)| v.as_slice())
    }
}

fn embed_paragraph(
    paragraph: &[String],
    encoder: &EncoderParams,
    vocab: &Vocab,
) -> Result<ParagraphVectors> {
    let cfg = &encoder.config;
    if paragraph.is_empty() {
        return Ok(ParagraphVectors { rows: Vec::new() });
    }

    // Window the paragraph to max_seq at word granularity, half overlapping;
    // each word's vectors come from the first window containing it.
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut covered_upto = 0usize;
    let mut start = 0usize;
    while covered_upto < paragraph.len() {
        let input = linearize_words(
            &[],
            paragraph,
            vocab,
            cfg.max_seq,
            (start, paragraph.len() - 1),
            "context",
        )?;
        let output = run_forward(encoder, &input.piece_ids, None, None, Head::None, false)?;
        let hidden = output.hidden_tensor();
        let mut max_word_seen: Option<usize> = None;
        for (pos, origin) in input.segment_map.iter().enumerate() {
            if let Origin::Text { word_idx, .. } = origin {
                if *word_idx >= covered_upto {
                    rows.push((*word_idx, hidden.row(pos).to_vec()));
                }
                max_word_seen = Some(max_word_seen.map_or(*word_idx, |m: usize| m.max(*word_idx)));
            }
        }
        let last_word = max_word_seen.filter(|&w| w + 1 > covered_upto).ok_or_else(|| {
            Error::Input(format!(
                "paragraph window starting at word {start} made no progress under max_seq {}",
                cfg.max_seq
            ))
        })?;
        covered_upto = last_word + 1;
        if covered_upto >= paragraph.len() {
            break;
        }
        // Half-window overlap.
        let window_words = last_word + 1 - start;
        start += (window_words / 2).max(1);
    }
    rows.sort_by_key(|(w, _)| *w);
    Ok(ParagraphVectors { rows })
}
