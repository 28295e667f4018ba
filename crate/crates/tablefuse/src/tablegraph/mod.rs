//! Question+table linearization and the token-pair relation matrix that
//! drives the relation-biased attention.

mod linearize;
mod relations;

pub use linearize::{linearize, linearize_words, LinearizedInput, Origin};
pub use relations::{build_relations, dump_relations, RelationMatrix, RelationType, N_RELATION_TYPES};
