//! Checkpoint store: a length-prefixed JSON manifest (version, encoder
//! config, tensor name -> shape -> byte offset, freeze flags) followed by a
//! little-endian IEEE-754 f64 payload.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderParams};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: EncoderConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(params: &EncoderParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, tensor) in params.iter() {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset,
            frozen: params.is_frozen(name),
        });
        offset += (tensor.numel() * 8) as u64;
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: params.config.clone(),
        tensors: entries,
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;

    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&manifest_bytes).map_err(io_err)?;
    for (_, tensor) in params.iter() {
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);

    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(io_err)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes).map_err(io_err)?;
    let manifest: Manifest =
        serde_json::from_slice(&manifest_bytes).map_err(|e| Error::Format(e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io_err)?;

    let mut tensors = BTreeMap::new();
    let mut frozen = BTreeSet::new();
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 8;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "tensor {} extends past the payload",
                entry.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data));
        if entry.frozen {
            frozen.insert(entry.name.clone());
        }
    }
    Ok(EncoderParams::from_parts(manifest.config, tensors, frozen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::FreezePolicy;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut params = EncoderParams::init(
            EncoderConfig {
                n_layers: 2,
                vocab_size: 17,
                context_layers: vec![1],
                ..EncoderConfig::default()
            },
            42,
        )
        .unwrap();
        params.apply_freeze_policy(FreezePolicy::Base);
        let path = std::env::temp_dir().join("tablefuse-ckpt-test.bin");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, params.config);
        assert_eq!(loaded.n_tensors(), params.n_tensors());
        for (name, tensor) in params.iter() {
            assert!(loaded.get(name).unwrap().bits_eq(tensor), "{name} changed");
            assert_eq!(loaded.is_frozen(name), params.is_frozen(name), "{name} freeze flag");
        }
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let params = EncoderParams::init(
            EncoderConfig {
                n_layers: 1,
                vocab_size: 9,
                ..EncoderConfig::default()
            },
            1,
        )
        .unwrap();
        let path = std::env::temp_dir().join("tablefuse-ckpt-trunc.bin");
        save_checkpoint(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
