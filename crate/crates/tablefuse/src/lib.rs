//! Table question answering with structure-aware encoding.
//!
//! The pipeline: a JSONL corpus of questions paired with article text and
//! tables ([`corpus`]); a corpus-built subword tokenizer ([`tokenizer`]);
//! table linearization with `[SEP]` cell boundaries and a five-type token
//! relation matrix ([`tablegraph`]); a from-scratch f64 transformer with
//! relation-biased attention and an optional text-aware context head
//! ([`encoder`], [`autograd`]); table-text n-gram linking that feeds the
//! context head ([`contextlink`]); masked-LM pretraining and span
//! finetuning ([`training`]); document-level span prediction ([`spanqa`]);
//! late fusion of a generic and a table model ([`fusion`]); and the
//! evaluation suite ([`metrics`]).

pub mod autograd;
pub mod contextlink;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod spanqa;
pub mod tablegraph;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
