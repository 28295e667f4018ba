//! On-disk format for context stacks: length-prefixed JSON manifest plus a
//! little-endian f64 payload, one `r x d` block per table word.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::encoder::ContextStack;
use crate::error::{Error, Result};

/// Context stacks of every table of one document.
#[derive(Debug, Clone)]
pub struct DocStacks {
    pub doc_id: String,
    pub tables: Vec<TableStacks>,
}

#[derive(Debug, Clone)]
pub struct TableStacks {
    pub table_id: String,
    /// One stack per flattened table word.
    pub stacks: Vec<ContextStack>,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    table_id: String,
    n_words: usize,
    valid: Vec<Vec<bool>>,
}

#[derive(Serialize, Deserialize)]
struct DocEntry {
    doc_id: String,
    tables: Vec<TableEntry>,
}

#[derive(Serialize, Deserialize)]
struct StacksManifest {
    version: u32,
    rows: usize,
    dim: usize,
    docs: Vec<DocEntry>,
}

pub fn save_stacks(path: impl AsRef<Path>, docs: &[DocStacks], rows: usize, dim: usize) -> Result<()> {
    let path = path.as_ref();
    let manifest = StacksManifest {
        version: 1,
        rows,
        dim,
        docs: docs
            .iter()
            .map(|d| DocEntry {
                doc_id: d.doc_id.clone(),
                tables: d
                    .tables
                    .iter()
                    .map(|t| TableEntry {
                        table_id: t.table_id.clone(),
                        n_words: t.stacks.len(),
                        valid: t.stacks.iter().map(|s| s.valid.clone()).collect(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&manifest_bytes).map_err(io_err)?;
    for doc in docs {
        for table in &doc.tables {
            for stack in &table.stacks {
                for &v in stack.rows.data() {
                    w.write_all(&v.to_le_bytes()).map_err(io_err)?;
                }
            }
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_stacks(path: impl AsRef<Path>) -> Result<Vec<DocStacks>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);

    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(io_err)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes).map_err(io_err)?;
    let manifest: StacksManifest =
        serde_json::from_slice(&manifest_bytes).map_err(|e| Error::Format(e.to_string()))?;
    if manifest.version != 1 {
        return Err(Error::Format(format!("unsupported stacks version {}", manifest.version)));
    }
    let block = manifest.rows * manifest.dim * 8;

    let mut docs = Vec::with_capacity(manifest.docs.len());
    for doc_entry in manifest.docs {
        let mut tables = Vec::with_capacity(doc_entry.tables.len());
        for table_entry in doc_entry.tables {
            if table_entry.valid.len() != table_entry.n_words {
                return Err(Error::Format(format!(
                    "table {}: {} masks for {} words",
                    table_entry.table_id,
                    table_entry.valid.len(),
                    table_entry.n_words
                )));
            }
            let mut stacks = Vec::with_capacity(table_entry.n_words);
            for valid in table_entry.valid {
                let mut bytes = vec![0u8; block];
                r.read_exact(&mut bytes).map_err(io_err)?;
                let data: Vec<f64> = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                if valid.len() != manifest.rows {
                    return Err(Error::Format("mask length differs from row count".into()));
                }
                stacks.push(ContextStack {
                    rows: Tensor::new(vec![manifest.rows, manifest.dim], data),
                    valid,
                });
            }
            tables.push(TableStacks {
                table_id: table_entry.table_id,
                stacks,
            });
        }
        docs.push(DocStacks {
            doc_id: doc_entry.doc_id,
            tables,
        });
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stacks_round_trip() {
        let mut stack = ContextStack::empty(3, 2);
        stack.rows.data_mut()[0] = 1.5;
        stack.rows.data_mut()[1] = -2.25;
        stack.valid[0] = true;
        let docs = vec![DocStacks {
            doc_id: "d0".into(),
            tables: vec![TableStacks {
                table_id: "d0-t0".into(),
                stacks: vec![stack.clone(), ContextStack::empty(3, 2)],
            }],
        }];
        let path = std::env::temp_dir().join("tablefuse-stacks-test.bin");
        save_stacks(&path, &docs, 3, 2).unwrap();
        let loaded = load_stacks(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].doc_id, "d0");
        assert_eq!(loaded[0].tables[0].stacks.len(), 2);
        assert!(loaded[0].tables[0].stacks[0].rows.bits_eq(&stack.rows));
        assert_eq!(loaded[0].tables[0].stacks[0].valid, stack.valid);
    }
}
