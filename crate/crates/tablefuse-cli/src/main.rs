//! Operator surface for the table-QA pipeline. Subcommands compose the
//! library stages; all randomness sits behind `--seed` and every run with
//! identical flags produces identical output files.
//!
//! Exit codes: 0 success, 1 bad input (usage, config, validation), 2
//! runtime failure. Set `TABLEFUSE_LOG=debug` for progress lines on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tablefuse::contextlink::{
    build_frequent_words, build_frequent_words_from_text, dump_matches, embed_context, link,
    load_stacks, save_stacks, DocStacks, TableStacks, DEFAULT_STOPWORDS,
};
use tablefuse::corpus::{generate_synthetic, load_corpus, save_corpus, DatasetFilter, SynthConfig};
use tablefuse::encoder::{
    load_checkpoint, save_checkpoint, EncoderConfig, EncoderParams, FreezePolicy,
};
use tablefuse::error::Error;
use tablefuse::fusion::{fuse_all, grid_search, FusionParams, GridSpec};
use tablefuse::metrics::{evaluate, Variant};
use tablefuse::spanqa::{load_predictions, predict_corpus, save_predictions, PredictMode};
use tablefuse::tokenizer::{build_vocab, Vocab};
use tablefuse::training::{finetune_span, log_to_csv, pretrain_mlm, MlmConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "tablefuse", version, about = "Table question answering pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (and optionally its vocabulary).
    Generate(GenerateArgs),
    /// Masked-LM pretraining (tables-only with a frozen base, or full text).
    Pretrain(PretrainArgs),
    /// Span finetuning over a staged curriculum.
    Finetune(FinetuneArgs),
    /// Table-text linking and context-stack embedding.
    Link(LinkArgs),
    /// Document-level span prediction.
    Predict(PredictArgs),
    /// Grid search for the fusion parameters on a validation set.
    Gridsearch(GridsearchArgs),
    /// Late fusion of generic and table prediction files.
    Fuse(FuseArgs),
    /// Evaluate a prediction file against gold annotations.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Synthetic corpus configuration (JSON `SynthConfig`); defaults apply
    /// when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output corpus JSONL.
    #[arg(long)]
    out: PathBuf,
    /// Also build and write a vocabulary file.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    vocab_size: usize,
    /// Number of documents (overrides the config file).
    #[arg(long)]
    n_docs: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Encoder configuration JSON; desk-scale defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from an existing checkpoint instead of a fresh init.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    warmup: u64,
    /// Freeze policy: none (train everything) or base (bias-only).
    #[arg(long, value_enum, default_value_t = FreezeArg::None)]
    freeze: FreezeArg,
    /// Sequence source: tables-only, or full (tables plus paragraphs).
    #[arg(long, value_enum, default_value_t = FilterArg::TablesOnly)]
    filter: FilterArg,
    /// Disable relation matrices (text-mode encoder).
    #[arg(long)]
    no_relations: bool,
    /// Stop early once train-set perplexity drops below this.
    #[arg(long)]
    stop_below: Option<f64>,
    /// Metrics log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Staged curriculum (JSON `TrainConfig`).
    #[arg(long)]
    train_config: PathBuf,
    /// Start from this checkpoint (else fresh init from --config/--seed).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Context stacks for context-capable encoders.
    #[arg(long)]
    stacks: Option<PathBuf>,
    /// Extend a context-free checkpoint with the text-aware head at these
    /// layers (comma-separated indices) before training.
    #[arg(long, value_delimiter = ',')]
    add_context_layers: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct LinkArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Frozen text encoder checkpoint used for the context embeddings.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Stop-word list (one word per line); the built-in English list when
    /// omitted.
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Output stacks file.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSONL dump of the raw n-gram matches.
    #[arg(long)]
    matches: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Context stacks (table mode with a context-capable encoder).
    #[arg(long)]
    context_stacks: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for per-document parallelism.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct GridsearchArgs {
    #[arg(long)]
    preds_generic: PathBuf,
    #[arg(long)]
    preds_table: PathBuf,
    /// Gold corpus the validation predictions are scored against.
    #[arg(long)]
    corpus: PathBuf,
    /// Grid specification JSON; the built-in default grid when omitted.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Selected parameters (JSON sidecar consumed by `fuse`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    preds_generic: PathBuf,
    #[arg(long)]
    preds_table: PathBuf,
    /// Fusion parameters JSON (from `gridsearch`).
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = VariantArg::Span1)]
    variant: VariantArg,
    /// Write the report JSON here as well as printing the table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FreezeArg {
    None,
    Base,
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterArg {
    Full,
    TablesOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Generic,
    Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Span5,
    Span1,
    String,
    Accuracy,
    Long,
}

impl From<FreezeArg> for FreezePolicy {
    fn from(v: FreezeArg) -> Self {
        match v {
            FreezeArg::None => FreezePolicy::None,
            FreezeArg::Base => FreezePolicy::Base,
        }
    }
}

impl From<FilterArg> for DatasetFilter {
    fn from(v: FilterArg) -> Self {
        match v {
            FilterArg::Full => DatasetFilter::Full,
            FilterArg::TablesOnly => DatasetFilter::TablesOnly,
        }
    }
}

impl From<ModeArg> for PredictMode {
    fn from(v: ModeArg) -> Self {
        match v {
            ModeArg::Generic => PredictMode::Generic,
            ModeArg::Table => PredictMode::Table,
        }
    }
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Span5 => Variant::Span5,
            VariantArg::Span1 => Variant::Span1,
            VariantArg::String => Variant::String,
            VariantArg::Accuracy => Variant::Accuracy,
            VariantArg::Long => Variant::Long,
        }
    }
}

fn debug_log(msg: &str) {
    if std::env::var("TABLEFUSE_LOG").map(|v| v == "debug").unwrap_or(false) {
        eprintln!("[tablefuse] {msg}");
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_model_for(
    vocab: &Vocab,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    seed: u64,
) -> Result<EncoderParams, Error> {
    match checkpoint {
        Some(path) => load_checkpoint(path),
        None => {
            let mut config: EncoderConfig = match config {
                Some(path) => read_json(path)?,
                None => EncoderConfig::default(),
            };
            if config.vocab_size == 0 {
                config.vocab_size = vocab.len();
            }
            EncoderParams::init(config, seed)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(args) => {
            let mut config: SynthConfig = match &args.config {
                Some(path) => read_json(path)?,
                None => SynthConfig::default(),
            };
            if let Some(n) = args.n_docs {
                config.n_docs = n;
            }
            let docs = generate_synthetic(&config, args.seed)?;
            save_corpus(&args.out, &docs)?;
            debug_log(&format!("wrote {} documents to {}", docs.len(), args.out.display()));
            if let Some(vocab_path) = &args.vocab {
                let vocab = build_vocab(&docs, args.vocab_size)?;
                vocab.save(vocab_path)?;
                debug_log(&format!("wrote vocabulary of {} pieces", vocab.len()));
            }
            Ok(())
        }
        Command::Pretrain(args) => {
            let docs = load_corpus(&args.corpus)?;
            let vocab = Vocab::load(&args.vocab)?;
            let mut params = load_model_for(&vocab, args.init.as_deref(), args.config.as_deref(), args.seed)?;
            let config = MlmConfig {
                epochs: args.epochs,
                lr: args.lr,
                warmup_steps: args.warmup,
                seed: args.seed,
                freeze: args.freeze.into(),
                filter: args.filter.into(),
                use_relations: !args.no_relations,
                stop_below_perplexity: args.stop_below,
            };
            let log = pretrain_mlm(&docs, &docs, &mut params, &vocab, &config)?;
            if let Some(last) = log.last() {
                debug_log(&format!(
                    "epoch {}: loss {:.4}, train perplexity {:.4}",
                    last.epoch, last.loss, last.metric
                ));
            }
            save_checkpoint(&params, &args.out)?;
            if let Some(log_path) = &args.log {
                std::fs::write(log_path, log_to_csv(&log))
                    .map_err(|e| Error::io(log_path.display().to_string(), e))?;
            }
            Ok(())
        }
        Command::Finetune(args) => {
            let docs = load_corpus(&args.corpus)?;
            let vocab = Vocab::load(&args.vocab)?;
            let mut params =
                load_model_for(&vocab, args.checkpoint.as_deref(), args.config.as_deref(), args.seed)?;
            if let Some(layers) = &args.add_context_layers {
                params.extend_with_context(layers, args.seed)?;
                debug_log(&format!("extended with context layers {layers:?}"));
            }
            let train_config: TrainConfig = read_json(&args.train_config)?;
            let stacks = match &args.stacks {
                Some(path) => Some(load_stacks(path)?),
                None => None,
            };
            let report = finetune_span(&docs, &mut params, &vocab, &train_config, stacks.as_deref())?;
            debug_log(&format!(
                "finetuned {} stages; {} instances skipped for truncation",
                train_config.stages.len(),
                report.skipped_instances
            ));
            save_checkpoint(&params, &args.out)?;
            if let Some(log_path) = &args.log {
                std::fs::write(log_path, log_to_csv(&report.log))
                    .map_err(|e| Error::io(log_path.display().to_string(), e))?;
            }
            Ok(())
        }
        Command::Link(args) => {
            let docs = load_corpus(&args.corpus)?;
            let vocab = Vocab::load(&args.vocab)?;
            let encoder = load_checkpoint(&args.checkpoint)?;
            let freq = match &args.stopwords {
                Some(path) => build_frequent_words(&docs, path)?,
                None => build_frequent_words_from_text(&docs, DEFAULT_STOPWORDS),
            };
            let mut all = Vec::with_capacity(docs.len());
            let mut match_dump = String::new();
            for doc in &docs {
                let mut tables = Vec::with_capacity(doc.tables.len());
                for table in &doc.tables {
                    let matches = link(table, &doc.paragraphs, &freq);
                    if args.matches.is_some() {
                        match_dump.push_str(&dump_matches(&matches));
                    }
                    let stacks = embed_context(&matches, &doc.paragraphs, &encoder, &vocab)?;
                    tables.push(TableStacks {
                        table_id: table.id.clone(),
                        stacks,
                    });
                }
                all.push(DocStacks {
                    doc_id: doc.id.clone(),
                    tables,
                });
            }
            save_stacks(&args.out, &all, encoder.config.context_rows, encoder.config.d_model())?;
            if let Some(path) = &args.matches {
                std::fs::write(path, match_dump)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
            debug_log(&format!("linked {} documents", all.len()));
            Ok(())
        }
        Command::Predict(args) => {
            let docs = load_corpus(&args.corpus)?;
            let vocab = Vocab::load(&args.vocab)?;
            let params = load_checkpoint(&args.checkpoint)?;
            let stacks = match &args.context_stacks {
                Some(path) => Some(load_stacks(path)?),
                None => None,
            };
            let mode: PredictMode = args.mode.into();
            let preds = if args.jobs <= 1 {
                predict_corpus(&docs, &params, &vocab, mode, stacks.as_deref())?
            } else {
                predict_parallel(&docs, &params, &vocab, mode, stacks.as_deref(), args.jobs)?
            };
            save_predictions(&args.out, &preds)?;
            debug_log(&format!("predicted {} documents", preds.len()));
            Ok(())
        }
        Command::Gridsearch(args) => {
            let preds_c = load_predictions(&args.preds_generic)?;
            let preds_t = load_predictions(&args.preds_table)?;
            let gold = load_corpus(&args.corpus)?;
            let grid: GridSpec = match &args.grid {
                Some(path) => read_json(path)?,
                None => GridSpec::default(),
            };
            let (params, f1) = grid_search(&preds_c, &preds_t, &gold, &grid)?;
            write_json(&args.out, &params)?;
            println!(
                "selected alpha={} beta={} gamma={} (validation string-F1 {:.4})",
                params.alpha, params.beta, params.gamma, f1
            );
            Ok(())
        }
        Command::Fuse(args) => {
            let preds_c = load_predictions(&args.preds_generic)?;
            let preds_t = load_predictions(&args.preds_table)?;
            let params: FusionParams = read_json(&args.params)?;
            let fused = fuse_all(&preds_c, &preds_t, &params)?;
            save_predictions(&args.out, &fused)?;
            Ok(())
        }
        Command::Eval(args) => {
            let preds = load_predictions(&args.preds)?;
            let gold = load_corpus(&args.corpus)?;
            let report = evaluate(&preds, &gold, args.variant.into())?;
            print!("{}", report.text_table());
            println!("F1 {:.4}", report.f1);
            if let Some(path) = &args.out {
                write_json(path, &report)?;
            }
            Ok(())
        }
    }
}

/// Score documents on `jobs` threads against the shared immutable
/// checkpoint; output order matches the corpus.
fn predict_parallel(
    docs: &[tablefuse::corpus::Document],
    params: &EncoderParams,
    vocab: &Vocab,
    mode: PredictMode,
    stacks: Option<&[DocStacks]>,
    jobs: usize,
) -> Result<Vec<tablefuse::spanqa::SpanPrediction>, Error> {
    let by_doc: std::collections::HashMap<&str, &DocStacks> = stacks
        .map(|all| all.iter().map(|d| (d.doc_id.as_str(), d)).collect())
        .unwrap_or_default();
    let mut results: Vec<Option<tablefuse::spanqa::SpanPrediction>> = vec![None; docs.len()];
    let next = std::sync::atomic::AtomicUsize::new(0);
    let errors = std::sync::Mutex::new(Vec::new());
    let slots = std::sync::Mutex::new(&mut results);

    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= docs.len() {
                    break;
                }
                let doc = &docs[i];
                let out = tablefuse::spanqa::predict_document(
                    doc,
                    params,
                    vocab,
                    mode,
                    by_doc.get(doc.id.as_str()).copied(),
                );
                match out {
                    Ok(pred) => {
                        let mut guard = slots.lock().expect("result lock");
                        guard[i] = Some(pred);
                    }
                    Err(e) => errors.lock().expect("error lock").push(e),
                }
            });
        }
    });

    if let Some(e) = errors.into_inner().expect("error lock").into_iter().next() {
        return Err(e);
    }
    Ok(results.into_iter().map(|p| p.expect("all documents scored")).collect())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit 1; `--help`/`--version` exit 0.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
