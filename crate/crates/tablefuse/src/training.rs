//! The two training regimes: masked-LM pretraining over tables (optionally
//! with the base frozen so only the relation biases move) and span
//! finetuning over sampled training instances, staged full -> tables-only.

use std::collections::HashMap;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::ContextBundle;
use crate::contextlink::DocStacks;
use crate::corpus::{
    sample_training_instances_filtered, DatasetFilter, Document, Location, SamplingStrategy,
    TrainingInstance, Window, WindowSpec,
};
use crate::encoder::{
    bind_stacks, run_forward, Adam, EncoderParams, FreezePolicy, Head, ParamGrads,
};
use crate::error::{Error, Result};
use crate::tablegraph::{build_relations, linearize, linearize_words, LinearizedInput, RelationMatrix};
use crate::tokenizer::Vocab;

/// Fraction of eligible positions perturbed by the masked-LM objective.
const MASK_FRACTION: f64 = 0.15;

/// One masked sequence: perturbed inputs plus (position, original id) labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmBatch {
    pub inputs: Vec<usize>,
    pub labels: Vec<(usize, usize)>,
}

/// Perturb `ceil(0.15 * eligible)` non-special positions, 80/10/10
/// mask/random/keep, deterministically under `seed`.
pub fn mask_batch(piece_ids: &[usize], vocab: &Vocab, seed: u64) -> MlmBatch {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let eligible: Vec<usize> = (0..piece_ids.len())
        .filter(|&p| !vocab.is_special(piece_ids[p]))
        .collect();
    let k = ((eligible.len() as f64) * MASK_FRACTION).ceil() as usize;
    let mut order = eligible;
    order.shuffle(&mut rng);
    let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
    chosen.sort_unstable();

    let mut inputs = piece_ids.to_vec();
    let mut labels = Vec::with_capacity(k);
    for &pos in &chosen {
        labels.push((pos, piece_ids[pos]));
        let u: f64 = rng.gen();
        if u < 0.8 {
            inputs[pos] = vocab.mask;
        } else if u < 0.9 {
            // Random non-special replacement.
            loop {
                let id = rng.gen_range(0..vocab.len());
                if !vocab.is_special(id) {
                    inputs[pos] = id;
                    break;
                }
            }
        } // else keep
    }
    MlmBatch { inputs, labels }
}

/// Which segments feed an MLM stage.
fn mlm_sequences(
    corpus: &[Document],
    vocab: &Vocab,
    max_seq: usize,
    filter: DatasetFilter,
    use_relations: bool,
) -> Result<Vec<(LinearizedInput, Option<RelationMatrix>)>> {
    let mut out = Vec::new();
    for doc in corpus {
        for table in &doc.tables {
            let window = (table.header_row_count, table.n_rows - 1);
            let input = linearize(&[], table, vocab, max_seq, window)?;
            let rel = if use_relations {
                Some(build_relations(&input, table)?)
            } else {
                None
            };
            out.push((input, rel));
        }
        if filter == DatasetFilter::Full {
            for (p, para) in doc.paragraphs.iter().enumerate() {
                if para.is_empty() {
                    continue;
                }
                let input =
                    linearize_words(&[], para, vocab, max_seq, (0, para.len() - 1), &format!("p{p}"))?;
                out.push((input, None));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Sampling("no sequences to pretrain on".into()));
    }
    Ok(out)
}

/// Configuration of one masked-LM pretraining run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MlmConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Linear learning-rate warmup steps.
    pub warmup_steps: u64,
    pub seed: u64,
    pub freeze: FreezePolicy,
    /// Include paragraphs as well as tables.
    pub filter: DatasetFilter,
    /// Feed table relation matrices to the encoder.
    pub use_relations: bool,
    /// Stop once held-out perplexity drops below this value.
    pub stop_below_perplexity: Option<f64>,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig {
            epochs: 50,
            lr: 1e-3,
            warmup_steps: 200,
            seed: 0,
            freeze: FreezePolicy::None,
            filter: DatasetFilter::TablesOnly,
            use_relations: true,
            stop_below_perplexity: None,
        }
    }
}

/// One log row per epoch: training loss and the stage metric (held-out
/// perplexity for MLM stages).
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub metric: f64,
}

pub fn log_to_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from("stage,epoch,loss,metric\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.stage, r.epoch, r.loss, r.metric));
    }
    out
}

/// Masked-LM pretraining. Under `FreezePolicy::Base` only the relation
/// biases move, mirroring the bias-only pretraining regime. Held-out
/// perplexity is evaluated on `eval_docs` each epoch.
pub fn pretrain_mlm(
    corpus: &[Document],
    eval_docs: &[Document],
    params: &mut EncoderParams,
    vocab: &Vocab,
    config: &MlmConfig,
) -> Result<Vec<EpochLog>> {
    if !corpus.iter().any(|d| !d.tables.is_empty()) {
        return Err(Error::Sampling("corpus has no tables to pretrain on".into()));
    }
    let sequences = mlm_sequences(corpus, vocab, params.config.max_seq, config.filter, config.use_relations)?;
    params.apply_freeze_policy(config.freeze);
    let mut adam = Adam::with_warmup(config.lr, config.warmup_steps);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut counted = 0usize;
        for &si in &order {
            let (input, rel) = &sequences[si];
            let mask_seed = config.seed ^ ((epoch as u64) << 32) ^ (si as u64);
            let batch = mask_batch(&input.piece_ids, vocab, mask_seed);
            if batch.labels.is_empty() {
                continue;
            }
            let (loss, grads) = mlm_loss_and_grads(params, &batch, rel.as_ref())?;
            adam.step(params, &grads)?;
            epoch_loss += loss;
            counted += 1;
        }
        let avg_loss = if counted > 0 { epoch_loss / counted as f64 } else { 0.0 };
        let ppl = mlm_perplexity(eval_docs, params, vocab, config)?;
        log.push(EpochLog {
            stage: "mlm".into(),
            epoch,
            loss: avg_loss,
            metric: ppl,
        });
        if config.stop_below_perplexity.is_some_and(|t| ppl < t) {
            break;
        }
    }
    Ok(log)
}

fn mlm_loss_and_grads(
    params: &EncoderParams,
    batch: &MlmBatch,
    rel: Option<&RelationMatrix>,
) -> Result<(f64, ParamGrads)> {
    let mut out = run_forward(params, &batch.inputs, rel, None, Head::Mlm, true)?;
    let logits = out.mlm_logits.expect("mlm head requested");
    let positions: Rc<Vec<usize>> = Rc::new(batch.labels.iter().map(|(p, _)| *p).collect());
    let targets: Rc<Vec<usize>> = Rc::new(batch.labels.iter().map(|(_, id)| *id).collect());
    let picked = out.tape.select_rows(logits, positions);
    let loss_var = out.tape.cross_entropy(picked, targets);
    let loss = out.tape.value(loss_var).data()[0];
    let grads = out.backward(loss_var, params)?;
    Ok((loss, grads))
}

/// Masked-LM perplexity of `docs` under a fixed evaluation masking.
pub fn mlm_perplexity(
    docs: &[Document],
    params: &EncoderParams,
    vocab: &Vocab,
    config: &MlmConfig,
) -> Result<f64> {
    let sequences = mlm_sequences(docs, vocab, params.config.max_seq, config.filter, config.use_relations)?;
    let mut total_nll = 0.0;
    let mut total_labels = 0usize;
    for (si, (input, rel)) in sequences.iter().enumerate() {
        let batch = mask_batch(&input.piece_ids, vocab, 0x5eed ^ si as u64);
        if batch.labels.is_empty() {
            continue;
        }
        let out = run_forward(params, &batch.inputs, rel.as_ref(), None, Head::Mlm, false)?;
        let logits = out.mlm_logits_tensor().expect("mlm head requested");
        for &(pos, target) in &batch.labels {
            let row = logits.row(pos);
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = maxv + row.iter().map(|&v| (v - maxv).exp()).sum::<f64>().ln();
            total_nll += lse - row[target];
            total_labels += 1;
        }
    }
    if total_labels == 0 {
        return Err(Error::Sampling("no labels to evaluate perplexity on".into()));
    }
    Ok((total_nll / total_labels as f64).exp())
}

/// One curriculum stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub filter: DatasetFilter,
    pub strategy: SamplingStrategy,
    pub epochs: usize,
    pub lr: f64,
    /// Linear learning-rate warmup steps.
    pub warmup_steps: u64,
    pub seed: u64,
    pub freeze: FreezePolicy,
    /// Table windows carry relation matrices.
    pub use_relations: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            filter: DatasetFilter::Full,
            strategy: SamplingStrategy::within_positive(),
            epochs: 30,
            lr: 1e-3,
            warmup_steps: 200,
            seed: 0,
            freeze: FreezePolicy::None,
            use_relations: true,
        }
    }
}

/// The staged curriculum (e.g. full -> tables-only).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stages: Vec<StageConfig>,
}

/// Counters reported by a finetuning run.
#[derive(Debug, Clone, Default)]
pub struct SpanTrainReport {
    pub log: Vec<EpochLog>,
    /// Gold spans lost to window truncation.
    pub skipped_instances: usize,
}

/// Everything needed to score one training instance.
struct PreparedInstance {
    input: LinearizedInput,
    rel: Option<RelationMatrix>,
    bundle: Option<Rc<ContextBundle>>,
    /// Target start/end piece positions ([CLS] for negatives).
    target: (usize, usize),
}

fn prepare_instance(
    doc: &Document,
    window: &Window,
    label: Option<(usize, usize)>,
    vocab: &Vocab,
    params: &EncoderParams,
    use_relations: bool,
    stacks: Option<&DocStacks>,
) -> Result<Option<PreparedInstance>> {
    let cfg = &params.config;
    let (input, rel, bundle) = match window.segment {
        Location::Table(t) => {
            let table = &doc.tables[t];
            let row_range = window.row_range.expect("table windows carry row ranges");
            let input = linearize(&doc.question, table, vocab, cfg.max_seq, row_range)?;
            let rel = if use_relations {
                Some(build_relations(&input, table)?)
            } else {
                None
            };
            let bundle = if cfg.has_context() {
                let table_stacks = stacks
                    .and_then(|ds| ds.tables.iter().find(|ts| ts.table_id == table.id))
                    .ok_or_else(|| {
                        Error::Consistency(format!("no context stacks for table {:?}", table.id))
                    })?;
                Some(Rc::new(bind_stacks(
                    &input,
                    table,
                    &table_stacks.stacks,
                    cfg.context_rows,
                    cfg.d_model(),
                )?))
            } else {
                None
            };
            (input, rel, bundle)
        }
        Location::Text(p) => {
            let para = &doc.paragraphs[p];
            let input = linearize_words(
                &doc.question,
                para,
                vocab,
                cfg.max_seq,
                window.word_range,
                &format!("p{p}"),
            )?;
            let bundle = if cfg.has_context() {
                // Text windows have no table positions; the context head
                // sees an empty binding and emits zeros.
                Some(Rc::new(ContextBundle {
                    r: cfg.context_rows,
                    d: cfg.d_model(),
                    per_pos: vec![None; input.len()],
                    stacks: Vec::new(),
                }))
            } else {
                None
            };
            (input, None, bundle)
        }
    };

    let target = match label {
        None => (0, 0), // [CLS]
        Some(span) => {
            let table = match window.segment {
                Location::Table(t) => Some(&doc.tables[t]),
                Location::Text(_) => None,
            };
            match input.positions_of_word_span(table, span) {
                Some(ps) => ps,
                None => return Ok(None), // gold lost to truncation
            }
        }
    };
    Ok(Some(PreparedInstance {
        input,
        rel,
        bundle,
        target,
    }))
}

fn span_loss_and_grads(
    params: &EncoderParams,
    inst: &PreparedInstance,
    train: bool,
) -> Result<(f64, Option<ParamGrads>)> {
    let mut out = run_forward(
        params,
        &inst.input.piece_ids,
        inst.rel.as_ref(),
        inst.bundle.as_ref(),
        Head::Span,
        train,
    )?;
    let fs = out.span_start.expect("span head requested");
    let fe = out.span_end.expect("span head requested");
    let srow = out.tape.transpose(fs);
    let erow = out.tape.transpose(fe);
    let ls = out.tape.cross_entropy(srow, Rc::new(vec![inst.target.0]));
    let le = out.tape.cross_entropy(erow, Rc::new(vec![inst.target.1]));
    let sum = out.tape.add(ls, le);
    let loss_var = out.tape.scale(sum, 0.5);
    let loss = out.tape.value(loss_var).data()[0];
    if train {
        let grads = out.backward(loss_var, params)?;
        Ok((loss, Some(grads)))
    } else {
        out.tape.check_finite()?;
        Ok((loss, None))
    }
}

/// Span finetuning over the staged curriculum. Negatives are labeled with
/// the `[CLS]` position; the loss is the mean of the start and end
/// cross-entropies. Instances whose gold span fell out of the window are
/// skipped and counted.
pub fn finetune_span(
    corpus: &[Document],
    params: &mut EncoderParams,
    vocab: &Vocab,
    config: &TrainConfig,
    stacks: Option<&[DocStacks]>,
) -> Result<SpanTrainReport> {
    if config.stages.is_empty() {
        return Err(Error::Config("curriculum needs at least one stage".into()));
    }
    let stacks_by_doc: HashMap<&str, &DocStacks> = stacks
        .map(|all| all.iter().map(|d| (d.doc_id.as_str(), d)).collect())
        .unwrap_or_default();

    let mut report = SpanTrainReport::default();
    for (stage_idx, stage) in config.stages.iter().enumerate() {
        let instances = sample_training_instances_filtered(
            corpus,
            stage.filter,
            &stage.strategy,
            WindowSpec::default(),
            stage.seed,
        )?;
        if !instances.iter().any(|i| i.label.is_some()) {
            return Err(Error::Sampling("span stage requires annotated data".into()));
        }
        let mut prepared = Vec::with_capacity(instances.len());
        for TrainingInstance {
            doc_idx,
            window,
            label,
            ..
        } in &instances
        {
            let doc = &corpus[*doc_idx];
            match prepare_instance(
                doc,
                window,
                *label,
                vocab,
                params,
                stage.use_relations,
                stacks_by_doc.get(doc.id.as_str()).copied(),
            )? {
                Some(p) => prepared.push(p),
                None => report.skipped_instances += 1,
            }
        }
        if prepared.is_empty() {
            return Err(Error::Sampling(
                "every instance lost its gold span to truncation".into(),
            ));
        }

        params.apply_freeze_policy(stage.freeze);
        let mut adam = Adam::with_warmup(stage.lr, stage.warmup_steps);
        let mut rng = ChaCha20Rng::seed_from_u64(stage.seed);
        for epoch in 0..stage.epochs {
            let mut order: Vec<usize> = (0..prepared.len()).collect();
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for &pi in &order {
                let (loss, grads) = span_loss_and_grads(params, &prepared[pi], true)?;
                adam.step(params, &grads.expect("training pass returns grads"))?;
                epoch_loss += loss;
            }
            report.log.push(EpochLog {
                stage: format!("span{stage_idx}"),
                epoch,
                loss: epoch_loss / prepared.len() as f64,
                metric: f64::NAN,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthConfig};
    use crate::encoder::EncoderConfig;
    use crate::tokenizer::build_vocab;

    fn tiny_setup(n_docs: usize) -> (Vec<Document>, Vocab, EncoderParams) {
        let docs = generate_synthetic(
            &SynthConfig {
                n_docs,
                vocab_size: 80,
                n_tables: 2,
                n_rows: 2,
                n_cols: 2,
                cell_words_max: 1,
                paragraph_len: 6,
                table_answer_fraction: 1.0,
                no_answer_fraction: 0.0,
                ..SynthConfig::default()
            },
            3,
        )
        .unwrap();
        let vocab = build_vocab(&docs, 400).unwrap();
        let params = EncoderParams::init(
            EncoderConfig {
                n_layers: 2,
                n_heads: 2,
                head_dim: 8,
                ffn_dim: 32,
                vocab_size: vocab.len(),
                max_seq: 64,
                ..EncoderConfig::default()
            },
            11,
        )
        .unwrap();
        (docs, vocab, params)
    }

    fn snapshot(
        params: &EncoderParams,
    ) -> std::collections::HashMap<String, crate::autograd::Tensor> {
        params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn mask_batch_respects_ceiling_and_specials() {
        let (docs, vocab, _) = tiny_setup(2);
        let input = linearize(&docs[0].question, &docs[0].tables[0], &vocab, 64, (1, 1)).unwrap();
        let eligible = input
            .piece_ids
            .iter()
            .filter(|&&id| !vocab.is_special(id))
            .count();
        let batch = mask_batch(&input.piece_ids, &vocab, 9);
        assert_eq!(batch.labels.len(), ((eligible as f64) * 0.15).ceil() as usize);
        for &(pos, original) in &batch.labels {
            assert!(!vocab.is_special(input.piece_ids[pos]));
            assert_eq!(original, input.piece_ids[pos]);
        }
    }

    #[test]
    fn twenty_eligible_positions_perturb_three() {
        let (_, vocab, _) = tiny_setup(1);
        let word = vocab.len() - 1; // some non-special id
        let ids = vec![word; 20];
        assert!(!vocab.is_special(word));
        let batch = mask_batch(&ids, &vocab, 4);
        assert_eq!(batch.labels.len(), 3);
    }

    #[test]
    fn mask_batch_on_specials_only_is_empty() {
        let (_, vocab, _) = tiny_setup(1);
        let ids = vec![vocab.cls, vocab.sep, vocab.sep];
        let batch = mask_batch(&ids, &vocab, 1);
        assert!(batch.labels.is_empty());
        assert_eq!(batch.inputs, ids);
    }

    #[test]
    fn mask_batch_is_deterministic() {
        let (docs, vocab, _) = tiny_setup(1);
        let input = linearize(&[], &docs[0].tables[0], &vocab, 64, (1, 1)).unwrap();
        assert_eq!(
            mask_batch(&input.piece_ids, &vocab, 7),
            mask_batch(&input.piece_ids, &vocab, 7)
        );
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let (docs, vocab, mut params) = tiny_setup(2);
        let before = snapshot(&params);
        let config = MlmConfig {
            epochs: 0,
            ..MlmConfig::default()
        };
        pretrain_mlm(&docs, &docs, &mut params, &vocab, &config).unwrap();
        for (name, tensor) in params.iter() {
            assert!(tensor.bits_eq(&before[name]), "{name} changed");
        }
    }

    #[test]
    fn one_step_respects_the_freeze_mask() {
        let (docs, vocab, mut params) = tiny_setup(1);
        let before = snapshot(&params);
        let config = MlmConfig {
            epochs: 1,
            freeze: FreezePolicy::Base,
            ..MlmConfig::default()
        };
        pretrain_mlm(&docs, &docs, &mut params, &vocab, &config).unwrap();
        let mut some_bias_changed = false;
        for (name, tensor) in params.iter() {
            let was = &before[name];
            if EncoderParams::is_base_tensor(name) {
                assert!(tensor.bits_eq(was), "base tensor {name} changed");
            } else if !tensor.bits_eq(was) {
                some_bias_changed = true;
            }
        }
        assert!(some_bias_changed, "no relation bias moved");
    }

    #[test]
    fn negative_instance_loss_is_the_cls_log_likelihood() {
        // One negative window: the loss is the mean of the start and end
        // cross-entropies at the [CLS] position.
        let (docs, vocab, params) = tiny_setup(2);
        let doc = &docs[0];
        let windows = crate::corpus::enumerate_windows(doc, DatasetFilter::Full, WindowSpec::default());
        let negative = windows
            .iter()
            .find(|w| {
                doc.annotations
                    .iter()
                    .filter_map(|a| a.located_span())
                    .all(|(loc, span)| !crate::corpus::window_contains(doc, w, loc, span))
            })
            .expect("an answer-free window exists");
        let inst = prepare_instance(doc, negative, None, &vocab, &params, true, None)
            .unwrap()
            .expect("negatives never truncate gold");
        assert_eq!(inst.target, (0, 0));
        let (loss, _) = span_loss_and_grads(&params, &inst, false).unwrap();

        // Independent arithmetic from the raw span logits.
        let out = run_forward(&params, &inst.input.piece_ids, inst.rel.as_ref(), None, Head::Span, false).unwrap();
        let (fs, fe) = out.span_logit_vectors().unwrap();
        let log_softmax_at = |v: &[f64], i: usize| {
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            v[i] - lse
        };
        let expect = -(log_softmax_at(&fs, 0) + log_softmax_at(&fe, 0)) / 2.0;
        assert!((loss - expect).abs() < 1e-12, "loss {loss} vs {expect}");
    }

    #[test]
    fn span_finetune_decreases_loss() {
        let (docs, vocab, mut params) = tiny_setup(6);
        let config = TrainConfig {
            stages: vec![StageConfig {
                epochs: 8,
                lr: 2e-3,
                ..StageConfig::default()
            }],
        };
        let report = finetune_span(&docs, &mut params, &vocab, &config, None).unwrap();
        let first = report.log.first().unwrap().loss;
        let last = report.log.last().unwrap().loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn curriculum_is_reproducible() {
        let (docs, vocab, params) = tiny_setup(4);
        let config = TrainConfig {
            stages: vec![
                StageConfig {
                    epochs: 2,
                    ..StageConfig::default()
                },
                StageConfig {
                    filter: DatasetFilter::TablesOnly,
                    epochs: 2,
                    seed: 5,
                    ..StageConfig::default()
                },
            ],
        };
        let mut a = params.clone();
        let mut b = params.clone();
        finetune_span(&docs, &mut a, &vocab, &config, None).unwrap();
        finetune_span(&docs, &mut b, &vocab, &config, None).unwrap();
        for (name, tensor) in a.iter() {
            assert!(tensor.bits_eq(b.get(name).unwrap()), "{name} differs across runs");
        }
    }
}
