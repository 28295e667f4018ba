//! Token-pair relation types over a linearized table input.
//!
//! Five learned relation types connect table-cell tokens: body token to its
//! column header, body token to its row header (the column-0 cell of its
//! row), tokens of the same cell, tokens of different column-header cells,
//! and tokens of different row-header cells. Everything else (specials,
//! question tokens, unrelated cells) is `None` and carries zero bias.

use serde::Serialize;

use super::{LinearizedInput, Origin};
use crate::corpus::Table;
use crate::error::{Error, Result};

/// Number of learned relation types.
pub const N_RELATION_TYPES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationType {
    None,
    /// Body-cell token -> same-column header token (directed).
    CellCol,
    /// Body-cell token -> column-0 token of the same row (directed).
    CellRow,
    /// Tokens of one cell (symmetric).
    InCell,
    /// Tokens of different header-row cells (symmetric).
    CrossCol,
    /// Tokens of different column-0 body cells (symmetric).
    CrossRow,
}

impl RelationType {
    /// Bias-table index of a learned type; `None` has no bias.
    pub fn bias_index(self) -> Option<usize> {
        match self {
            RelationType::None => None,
            RelationType::CellCol => Some(0),
            RelationType::CellRow => Some(1),
            RelationType::InCell => Some(2),
            RelationType::CrossCol => Some(3),
            RelationType::CrossRow => Some(4),
        }
    }
}

/// Dense n-by-n relation assignment for one linearized input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationMatrix {
    pub n: usize,
    rel: Vec<RelationType>,
}

impl RelationMatrix {
    pub fn none(n: usize) -> Self {
        RelationMatrix {
            n,
            rel: vec![RelationType::None; n * n],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> RelationType {
        self.rel[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize, t: RelationType) {
        self.rel[i * self.n + j] = t;
    }

    pub fn count_non_none(&self) -> usize {
        self.rel.iter().filter(|&&t| t != RelationType::None).count()
    }
}

/// Classify an ordered pair of cell coordinates. Precedence when several
/// definitions apply: in-cell, cell-column, cell-row, cross-column,
/// cross-row.
fn classify(
    header_rows: usize,
    (ri, ci): (usize, usize),
    (rj, cj): (usize, usize),
) -> RelationType {
    let same_cell = (ri, ci) == (rj, cj);
    if same_cell {
        return RelationType::InCell;
    }
    let i_body = ri >= header_rows;
    let j_header = rj < header_rows;
    if i_body && j_header && ci == cj {
        return RelationType::CellCol;
    }
    if i_body && rj == ri && cj == 0 {
        return RelationType::CellRow;
    }
    if ri < header_rows && rj < header_rows {
        return RelationType::CrossCol;
    }
    if i_body && rj >= header_rows && ci == 0 && cj == 0 {
        return RelationType::CrossRow;
    }
    RelationType::None
}

/// Build the relation matrix for a linearized input of `table`.
pub fn build_relations(input: &LinearizedInput, table: &Table) -> Result<RelationMatrix> {
    if input.table_id != table.id {
        return Err(Error::Consistency(format!(
            "input was linearized from table {:?}, not {:?}",
            input.table_id, table.id
        )));
    }
    let n = input.len();
    let mut matrix = RelationMatrix::none(n);
    let cell_at = |p: usize| -> Option<(usize, usize)> {
        match input.segment_map[p] {
            Origin::Cell { row, col, .. } => Some((row, col)),
            _ => None,
        }
    };
    for i in 0..n {
        let Some(ci) = cell_at(i) else { continue };
        if ci.0 >= table.n_rows || ci.1 >= table.n_cols {
            return Err(Error::Consistency(format!(
                "position {i} maps to cell {ci:?} outside table {:?}",
                table.id
            )));
        }
        for j in 0..n {
            if i == j {
                continue;
            }
            let Some(cj) = cell_at(j) else { continue };
            matrix.set(i, j, classify(table.header_row_count, ci, cj));
        }
    }
    Ok(matrix)
}

#[derive(Serialize)]
struct RelationTriple {
    i: usize,
    j: usize,
    #[serde(rename = "type")]
    kind: RelationType,
}

/// Render the non-`None` entries as a sparse JSONL triple list.
pub fn dump_relations(matrix: &RelationMatrix) -> String {
    let mut out = String::new();
    for i in 0..matrix.n {
        for j in 0..matrix.n {
            let t = matrix.get(i, j);
            if t != RelationType::None {
                let triple = RelationTriple { i, j, kind: t };
                out.push_str(&serde_json::to_string(&triple).expect("serializable"));
                out.push('\n');
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::tablegraph::linearize;
    use crate::tokenizer::build_vocab;

    fn simple_table() -> Table {
        // 3 rows x 2 cols, 1 header row, one word per cell.
        Table {
            id: "t".into(),
            n_rows: 3,
            n_cols: 2,
            header_row_count: 1,
            cells: vec![
                vec![vec!["ha".into()], vec!["hb".into()]],
                vec![vec!["ra".into()], vec!["va".into()]],
                vec![vec!["rb".into()], vec!["vb".into()]],
            ],
        }
    }

    fn setup(table: &Table) -> (LinearizedInput, RelationMatrix) {
        let doc = Document {
            id: "d".into(),
            question: vec!["qq".into()],
            paragraphs: vec![],
            tables: vec![table.clone()],
            annotations: vec![],
        };
        let vocab = build_vocab(&[doc], 200).unwrap();
        let window = (table.header_row_count, table.n_rows - 1);
        let input = linearize(&["qq".into()], table, &vocab, 512, window).unwrap();
        let rel = build_relations(&input, table).unwrap();
        (input, rel)
    }

    fn pos_of(input: &LinearizedInput, row: usize, col: usize) -> usize {
        input
            .segment_map
            .iter()
            .position(|o| matches!(o, Origin::Cell { row: r, col: c, .. } if (*r, *c) == (row, col)))
            .unwrap()
    }

    #[test]
    fn body_to_header_is_cell_col() {
        let table = simple_table();
        let (input, rel) = setup(&table);
        let body = pos_of(&input, 1, 1);
        let header = pos_of(&input, 0, 1);
        assert_eq!(rel.get(body, header), RelationType::CellCol);
        // Directed: the reverse pair is not cell_col.
        assert_ne!(rel.get(header, body), RelationType::CellCol);
    }

    #[test]
    fn same_cell_pieces_relate_both_ways() {
        let table = Table {
            id: "t".into(),
            n_rows: 2,
            n_cols: 1,
            header_row_count: 1,
            cells: vec![vec![vec!["ha".into()]], vec![vec!["va".into(), "vb".into()]]],
        };
        let (input, rel) = setup(&table);
        let a = pos_of(&input, 1, 0);
        // find the second piece of the same cell
        let b = input
            .segment_map
            .iter()
            .enumerate()
            .filter(|(_, o)| matches!(o, Origin::Cell { row: 1, col: 0, .. }))
            .map(|(p, _)| p)
            .nth(1)
            .unwrap();
        assert_eq!(rel.get(a, b), RelationType::InCell);
        assert_eq!(rel.get(b, a), RelationType::InCell);
    }

    #[test]
    fn question_and_specials_carry_no_relations() {
        let table = simple_table();
        let (input, rel) = setup(&table);
        for i in 0..input.len() {
            for j in 0..input.len() {
                if !input.segment_map[i].answer_eligible() || !input.segment_map[j].answer_eligible()
                {
                    assert_eq!(rel.get(i, j), RelationType::None);
                }
            }
        }
    }

    #[test]
    fn diagonal_is_none() {
        let table = simple_table();
        let (input, rel) = setup(&table);
        for i in 0..input.len() {
            assert_eq!(rel.get(i, i), RelationType::None);
        }
    }

    #[test]
    fn mismatched_table_is_a_consistency_error() {
        let table = simple_table();
        let (input, _) = setup(&table);
        let mut other = table.clone();
        other.id = "other".into();
        assert!(matches!(
            build_relations(&input, &other),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn sparse_dump_is_valid_jsonl_of_typed_triples() {
        let table = simple_table();
        let (_, rel) = setup(&table);
        let dump = dump_relations(&rel);
        let mut lines = 0usize;
        for line in dump.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["i"].is_u64() && v["j"].is_u64());
            let t = v["type"].as_str().unwrap();
            assert!(["cell_col", "cell_row", "in_cell", "cross_col", "cross_row"].contains(&t));
            lines += 1;
        }
        assert_eq!(lines, rel.count_non_none());
    }

    #[test]
    fn full_3x2_matrix_matches_hand_enumeration() {
        let table = simple_table();
        let (input, rel) = setup(&table);
        let p = |r, c| pos_of(&input, r, c);
        // Hand-derived expectations for one word per cell.
        assert_eq!(rel.get(p(1, 0), p(0, 0)), RelationType::CellCol);
        assert_eq!(rel.get(p(2, 1), p(0, 1)), RelationType::CellCol);
        assert_eq!(rel.get(p(1, 1), p(1, 0)), RelationType::CellRow);
        assert_eq!(rel.get(p(2, 1), p(2, 0)), RelationType::CellRow);
        assert_eq!(rel.get(p(0, 0), p(0, 1)), RelationType::CrossCol);
        assert_eq!(rel.get(p(0, 1), p(0, 0)), RelationType::CrossCol);
        assert_eq!(rel.get(p(1, 0), p(2, 0)), RelationType::CrossRow);
        assert_eq!(rel.get(p(2, 0), p(1, 0)), RelationType::CrossRow);
        // Unrelated body cells in different rows and columns.
        assert_eq!(rel.get(p(1, 1), p(2, 0)), RelationType::None);
        assert_eq!(rel.get(p(1, 0), p(2, 1)), RelationType::None);
        // Row header -> its own body row is not cell_row (direction).
        assert_eq!(rel.get(p(1, 0), p(1, 1)), RelationType::None);
    }
}
