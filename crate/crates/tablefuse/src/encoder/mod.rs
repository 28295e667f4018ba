//! The relation-biased transformer encoder: configuration, the named
//! parameter registry with per-tensor freezing, the forward pass with
//! optional relation biases and the text-aware context head, reverse-mode
//! gradients, optimizers and checkpointing.

mod checkpoint;
mod forward;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    bind_stacks, relation_attention, run_forward, ForwardOutput, Head, ParamGrads,
};
pub use optim::{Adam, Sgd};

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::tablegraph::N_RELATION_TYPES;

/// Encoder hyperparameters. Desk-scale defaults: 4 layers, 4 heads of
/// width 16.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub n_relation_types: usize,
    /// Layers that receive the extra text-aware head; empty disables it.
    pub context_layers: Vec<usize>,
    /// Context rows per table word.
    pub context_rows: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 4,
            n_heads: 4,
            head_dim: 16,
            ffn_dim: 256,
            vocab_size: 0,
            max_seq: 512,
            n_relation_types: N_RELATION_TYPES,
            context_layers: Vec::new(),
            context_rows: 12,
        }
    }
}

impl EncoderConfig {
    pub fn d_model(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn has_context(&self) -> bool {
        !self.context_layers.is_empty()
    }

    pub fn is_context_layer(&self, layer: usize) -> bool {
        self.context_layers.contains(&layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.head_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("encoder vocab_size must be set".into()));
        }
        if self.n_relation_types != N_RELATION_TYPES {
            return Err(Error::Config(format!(
                "n_relation_types must be {N_RELATION_TYPES}"
            )));
        }
        if let Some(&bad) = self.context_layers.iter().find(|&&l| l >= self.n_layers) {
            return Err(Error::Config(format!(
                "context layer {bad} outside 0..{}",
                self.n_layers
            )));
        }
        if self.context_rows == 0 {
            return Err(Error::Config("context_rows must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen context rows for one table word: a `context_rows x d_model`
/// matrix of sub-word embeddings plus a validity mask. Invalid rows are
/// zero-padded.
#[derive(Debug, Clone)]
pub struct ContextStack {
    pub rows: Tensor,
    pub valid: Vec<bool>,
}

impl ContextStack {
    /// All-invalid stack (no text context for this word).
    pub fn empty(r: usize, d: usize) -> Self {
        ContextStack {
            rows: Tensor::zeros(vec![r, d]),
            valid: vec![false; r],
        }
    }

    pub fn valid_rows(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Which tensors train. `Base` mirrors the bias-only pretraining regime:
/// everything except the relation bias tables is frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    #[default]
    None,
    /// Freeze the base model, train only relation biases.
    Base,
}

/// All learnable tensors, keyed by name, with a per-tensor freeze flag.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl EncoderParams {
    /// Initialize a fresh model. Weights are N(0, 0.02), layer norms are
    /// identity, relation biases start at zero so the biased encoder begins
    /// exactly at the plain one.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = config.d_model();
        let k = config.head_dim;
        let mut tensors = BTreeMap::new();
        fn randn_into(
            tensors: &mut BTreeMap<String, Tensor>,
            name: &str,
            shape: Vec<usize>,
            rng: &mut ChaCha20Rng,
        ) {
            tensors.insert(name.to_string(), Tensor::randn(shape, 0.02, rng));
        }

        randn_into(&mut tensors, "embed.token", vec![config.vocab_size, d], &mut rng);
        randn_into(&mut tensors, "embed.position", vec![config.max_seq, d], &mut rng);
        tensors.insert("embed.ln.gamma".into(), ones(d));
        tensors.insert("embed.ln.beta".into(), Tensor::zeros(vec![d]));

        for l in 0..config.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            randn_into(&mut tensors, &p("attn.wq"), vec![d, d], &mut rng);
            tensors.insert(p("attn.bq"), Tensor::zeros(vec![d]));
            randn_into(&mut tensors, &p("attn.wk"), vec![d, d], &mut rng);
            tensors.insert(p("attn.bk"), Tensor::zeros(vec![d]));
            randn_into(&mut tensors, &p("attn.wv"), vec![d, d], &mut rng);
            tensors.insert(p("attn.bv"), Tensor::zeros(vec![d]));
            let heads = if config.is_context_layer(l) {
                config.n_heads + 1
            } else {
                config.n_heads
            };
            randn_into(&mut tensors, &p("attn.wo"), vec![heads * k, d], &mut rng);
            tensors.insert(p("attn.bo"), Tensor::zeros(vec![d]));
            tensors.insert(p("attn.ln.gamma"), ones(d));
            tensors.insert(p("attn.ln.beta"), Tensor::zeros(vec![d]));
            for h in 0..config.n_heads {
                tensors.insert(
                    p(&format!("attn.rel_k.h{h}")),
                    Tensor::zeros(vec![config.n_relation_types, k]),
                );
                tensors.insert(
                    p(&format!("attn.rel_v.h{h}")),
                    Tensor::zeros(vec![config.n_relation_types, k]),
                );
            }
            if config.is_context_layer(l) {
                randn_into(&mut tensors, &p("ctx.wq"), vec![d, k], &mut rng);
                randn_into(&mut tensors, &p("ctx.wk"), vec![d, k], &mut rng);
                randn_into(&mut tensors, &p("ctx.wv"), vec![d, k], &mut rng);
            }
            randn_into(&mut tensors, &p("ffn.w1"), vec![d, config.ffn_dim], &mut rng);
            tensors.insert(p("ffn.b1"), Tensor::zeros(vec![config.ffn_dim]));
            randn_into(&mut tensors, &p("ffn.w2"), vec![config.ffn_dim, d], &mut rng);
            tensors.insert(p("ffn.b2"), Tensor::zeros(vec![d]));
            tensors.insert(p("ffn.ln.gamma"), ones(d));
            tensors.insert(p("ffn.ln.beta"), Tensor::zeros(vec![d]));
        }

        randn_into(&mut tensors, "mlm.w", vec![d, config.vocab_size], &mut rng);
        tensors.insert("mlm.b".into(), Tensor::zeros(vec![config.vocab_size]));
        randn_into(&mut tensors, "span.start.w", vec![d, 1], &mut rng);
        tensors.insert("span.start.b".into(), Tensor::zeros(vec![1]));
        randn_into(&mut tensors, "span.end.w", vec![d, 1], &mut rng);
        tensors.insert("span.end.b".into(), Tensor::zeros(vec![1]));

        Ok(EncoderParams {
            config,
            tensors,
            frozen: BTreeSet::new(),
        })
    }

    pub fn from_parts(
        config: EncoderConfig,
        tensors: BTreeMap<String, Tensor>,
        frozen: BTreeSet<String>,
    ) -> Self {
        EncoderParams {
            config,
            tensors,
            frozen,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(|s| s.as_str())
    }

    /// True for original-model tensors, false for the relation bias tables.
    pub fn is_base_tensor(name: &str) -> bool {
        !name.contains(".rel_")
    }

    pub fn apply_freeze_policy(&mut self, policy: FreezePolicy) {
        self.frozen.clear();
        if policy == FreezePolicy::Base {
            for name in self.tensors.keys() {
                if Self::is_base_tensor(name) {
                    self.frozen.insert(name.clone());
                }
            }
        }
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        if frozen {
            self.frozen.insert(name.to_string());
        } else {
            self.frozen.remove(name);
        }
    }

    /// Add the text-aware head to the given layers of a context-free model:
    /// fresh context projections, and `head_dim` extra rows appended to each
    /// layer's output projection. All pretrained tensors are preserved
    /// bit-exactly; with all-invalid stacks the extended model computes the
    /// same function as before.
    pub fn extend_with_context(&mut self, layers: &[usize], seed: u64) -> Result<()> {
        if self.config.has_context() {
            return Err(Error::Config("model already has context layers".into()));
        }
        let mut sorted: Vec<usize> = layers.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() {
            return Err(Error::Config("no context layers given".into()));
        }
        if let Some(&bad) = sorted.iter().find(|&&l| l >= self.config.n_layers) {
            return Err(Error::Config(format!(
                "context layer {bad} outside 0..{}",
                self.config.n_layers
            )));
        }
        let d = self.config.d_model();
        let k = self.config.head_dim;
        let m = self.config.n_heads;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for &l in &sorted {
            let p = |s: &str| format!("layer{l}.{s}");
            let old = self
                .tensors
                .get(&p("attn.wo"))
                .expect("output projection exists")
                .clone();
            debug_assert_eq!(old.shape(), &[m * k, d]);
            let extra = Tensor::randn(vec![k, d], 0.02, &mut rng);
            let mut data = old.data().to_vec();
            data.extend_from_slice(extra.data());
            self.tensors
                .insert(p("attn.wo"), Tensor::new(vec![(m + 1) * k, d], data));
            for name in ["ctx.wq", "ctx.wk", "ctx.wv"] {
                self.tensors
                    .insert(p(name), Tensor::randn(vec![d, k], 0.02, &mut rng));
            }
        }
        self.config.context_layers = sorted;
        Ok(())
    }

    pub fn n_tensors(&self) -> usize {
        self.tensors.len()
    }
}

fn ones(d: usize) -> Tensor {
    Tensor::new(vec![d], vec![1.0; d])
}
