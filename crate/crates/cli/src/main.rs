use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use pht_core::align::{read_labels, write_labels, AttentionPredictor, PredictorConfig, PredictorTraining};
use pht_core::config::CONFIG_SCHEMA_VERSION;
use pht_core::data::{
    corpus_text, generate_toy_corpus, load_dataset, read_records, write_records, Dataset, ToyCorpusConfig,
};
use pht_core::decoding::{Constraints, DecodeConfig, ScorerKind};
use pht_core::model::sidecar_path;
use pht_core::pipeline::{
    attach_embeddings, check_vocab, evaluate, extract_labels, read_generations, write_generations, Summarizer,
};
use pht_core::train::{Example, TrainConfig, Trainer};
use pht_core::{ModelConfig, ModelSidecar, Pht, Vocabulary};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "pht",
    version,
    about = "Hierarchical transformer summarizer with attention-aligned decoding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Tiny,
    Desk,
    Wikisum,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Self::Tiny => ModelConfig::tiny(),
            Self::Desk => ModelConfig::desk(),
            Self::Wikisum => ModelConfig::wikisum(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a BPE vocabulary from the text of a JSONL corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 2000)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic key-paragraph corpus.
    GenToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, env = "PHT_SEED", default_value_t = 7)]
        seed: u64,
    },
    /// Train the summarizer, checkpointing into a directory.
    Train(TrainArgs),
    /// Cache reference paragraph attention of a trained model.
    ExtractLabels {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the paragraph attention predictor on cached labels.
    TrainAlign {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[arg(long, env = "PHT_SEED", default_value_t = 1)]
        seed: u64,
    },
    /// Beam-search summaries for every record of a dataset.
    Summarize(SummarizeArgs),
    /// ROUGE and attention agreement of generated summaries.
    Evaluate {
        #[arg(long)]
        generations: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Checkpoint whose configuration shaped the sources.
        #[arg(long)]
        model: PathBuf,
        /// Compute reference attention idf over the whole dataset.
        #[arg(long)]
        corpus_idf: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Flat TOML overriding preset fields (model and training keys).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_rate: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long, env = "PHT_SEED")]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SummarizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    predictor: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Defaults to the model's target length.
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 0.8)]
    beta: f64,
    /// vanilla, attalign, strcov, gnmt-cp or ptrgen-cov.
    #[arg(long, default_value = "vanilla")]
    scorer: ScorerKind,
    /// Keep only this many paragraphs ranked by predicted attention.
    #[arg(long)]
    compress_s: Option<usize>,
    #[arg(long, value_enum, default_value = "on")]
    block_trigrams: Switch,
    /// Accepted for interface symmetry; decoding is deterministic.
    #[arg(long, env = "PHT_SEED")]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildVocab { corpus, size, out } => build_vocab(&corpus, size, &out),
        Command::GenToyCorpus { out, samples, seed } => {
            let toy = generate_toy_corpus(&ToyCorpusConfig {
                samples,
                seed,
                ..ToyCorpusConfig::default()
            })?;
            let records: Vec<_> = toy.into_iter().map(|t| t.record).collect();
            write_records(&out, &records)?;
            info!("wrote {} records to {}", records.len(), out.display());
            Ok(())
        }
        Command::Train(args) => train(args),
        Command::ExtractLabels {
            model,
            vocab,
            data,
            out,
        } => {
            let vocab = Vocabulary::load(&vocab)?;
            let model = load_model(&model, &vocab)?;
            let dataset = load_data(&data, &vocab, model.config())?;
            let (labels, _) = extract_labels(&model, &dataset.samples)?;
            write_labels(&out, &labels)?;
            info!("wrote {} labels to {}", labels.len(), out.display());
            Ok(())
        }
        Command::TrainAlign {
            model,
            vocab,
            data,
            labels,
            out,
            steps,
            batch_size,
            seed,
        } => {
            let vocab = Vocabulary::load(&vocab)?;
            let model = load_model(&model, &vocab)?;
            let dataset = load_data(&data, &vocab, model.config())?;
            let labels = read_labels(&labels)?;
            let pairs = attach_embeddings(&model, &dataset.samples, &labels)?;
            ensure!(!pairs.is_empty(), "no labelled samples");
            let mut predictor = AttentionPredictor::new(PredictorConfig::for_model(model.config()), seed)?;
            let losses = predictor.train(
                &pairs,
                &PredictorTraining {
                    steps,
                    batch_size,
                    seed,
                    ..PredictorTraining::default()
                },
            )?;
            if let Some(last) = losses.last() {
                info!("predictor trained for {steps} steps, final batch loss {last:.6}");
            }
            predictor.save(&out, &vocab.hash())?;
            info!("wrote predictor to {}", out.display());
            Ok(())
        }
        Command::Summarize(args) => summarize(args),
        Command::Evaluate {
            generations,
            data,
            vocab,
            model,
            corpus_idf,
            out,
        } => {
            let vocab = Vocabulary::load(&vocab)?;
            let sidecar = ModelSidecar::load(sidecar_path(&model))?;
            check_vocab(&vocab, &sidecar.vocab_hash, "model")?;
            let dataset = load_data(&data, &vocab, &sidecar.model)?;
            let generations = read_generations(&generations)?;
            let report = evaluate(&generations, &dataset.samples, &vocab, &sidecar.model, corpus_idf)?;
            if report.unmatched > 0 {
                warn!("{} generations have no matching record", report.unmatched);
            }
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
                    println!(
                        "ROUGE-1 {:.4}  ROUGE-2 {:.4}  ROUGE-L {:.4}  over {} samples",
                        report.mean_rouge_1, report.mean_rouge_2, report.mean_rouge_l, report.samples
                    );
                }
                None => println!("{text}"),
            }
            Ok(())
        }
    }
}

fn build_vocab(corpus: &Path, size: usize, out: &Path) -> Result<()> {
    let (records, malformed) = read_records(corpus)?;
    if malformed > 0 {
        warn!("skipped {malformed} malformed lines");
    }
    ensure!(!records.is_empty(), "{} has no usable records", corpus.display());
    let vocab = Vocabulary::build(&corpus_text(&records), size)?;
    vocab.save(out)?;
    info!(
        "vocabulary of {} entries ({} merges), hash {}",
        vocab.len(),
        vocab.num_merges(),
        vocab.hash()
    );
    Ok(())
}

fn load_model(path: &Path, vocab: &Vocabulary) -> Result<Pht> {
    let (model, hash, _) = Pht::load(path).with_context(|| format!("loading model {}", path.display()))?;
    check_vocab(vocab, &hash, "model")?;
    Ok(model)
}

fn load_data(path: &Path, vocab: &Vocabulary, config: &ModelConfig) -> Result<Dataset> {
    let dataset = load_dataset(path, vocab, config)?;
    if dataset.malformed > 0 {
        warn!("{}: skipped {} malformed lines", path.display(), dataset.malformed);
    }
    if dataset.truncations > 0 {
        info!(
            "{}: {} truncations to fit the model limits",
            path.display(),
            dataset.truncations
        );
    }
    Ok(dataset)
}

/// Everything a run configuration file may set.
#[derive(Serialize)]
struct RunConfig<'a> {
    schema_version: u32,
    #[serde(flatten)]
    model: &'a ModelConfig,
    #[serde(flatten)]
    train: &'a TrainConfig,
}

/// Overlays a flat TOML file onto the preset values.
fn resolve_config(preset: Preset, file: Option<&Path>) -> Result<(ModelConfig, TrainConfig)> {
    let model = preset.config();
    let train = TrainConfig::default();
    let Some(path) = file else {
        return Ok((model, train));
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let overrides: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let base = RunConfig {
        schema_version: CONFIG_SCHEMA_VERSION,
        model: &model,
        train: &train,
    };
    let mut table: HashMap<String, toml::Value> = toml::Table::try_from(&base)?.into_iter().collect();
    for (key, value) in overrides {
        ensure!(table.contains_key(&key), "{}: unknown key {key:?}", path.display());
        table.insert(key, value);
    }
    let version = table.get("schema_version").and_then(toml::Value::as_integer);
    ensure!(
        version == Some(CONFIG_SCHEMA_VERSION as i64),
        "{}: unsupported schema_version {version:?}",
        path.display()
    );
    let merged: toml::Table = table.into_iter().collect();
    let model: ModelConfig = merged.clone().try_into()?;
    let train: TrainConfig = merged.try_into()?;
    Ok((model, train))
}

fn train(args: TrainArgs) -> Result<()> {
    let vocab = Vocabulary::load(&args.vocab)?;
    let (mut model_config, mut train_config) = resolve_config(args.preset, args.config.as_deref())?;
    if model_config.vocab_size != vocab.len() {
        info!("setting vocab_size to the vocabulary's {} entries", vocab.len());
        model_config.vocab_size = vocab.len();
    }
    let t = &mut train_config;
    if let Some(v) = args.steps {
        t.steps = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.base_rate {
        t.base_rate = v;
    }
    if let Some(v) = args.warmup_steps {
        t.warmup_steps = v;
    }
    if let Some(v) = args.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    model_config.validate()?;
    train_config.validate()?;

    let mut trainer = match &args.resume {
        Some(ckpt) => {
            let sidecar = ModelSidecar::load(sidecar_path(ckpt))?;
            check_vocab(&vocab, &sidecar.vocab_hash, "resumed checkpoint")?;
            if sidecar.model != model_config {
                warn!("resuming with the checkpoint's model configuration; preset and file model keys are ignored");
            }
            model_config = sidecar.model;
            let trainer = Trainer::resume(ckpt, train_config.clone())?;
            info!("resumed from {} at step {}", ckpt.display(), trainer.step());
            trainer
        }
        None => Trainer::new(
            Pht::new(model_config.clone(), train_config.seed)?,
            train_config.clone(),
            vocab.hash(),
        )?,
    };

    let to_examples = |path: &Path| -> Result<Vec<Example>> {
        let data = load_data(path, &vocab, &model_config)?;
        Ok(data
            .samples
            .iter()
            .map(|s| (s.source(&model_config), s.summary.clone()))
            .collect())
    };
    let train_set = to_examples(&args.train)?;
    ensure!(!train_set.is_empty(), "{} has no usable records", args.train.display());
    let valid_set = match &args.valid {
        Some(p) => to_examples(p)?,
        None => Vec::new(),
    };

    let outcome = trainer.run(&train_set, &valid_set, Some(&args.out_dir))?;
    for c in &outcome.checkpoints {
        match c.validation_loss {
            Some(l) => info!("checkpoint {} (validation loss {l:.6})", c.path.display()),
            None => info!("checkpoint {}", c.path.display()),
        }
    }
    if let Some(best) = &outcome.best {
        println!(
            "best checkpoint: {} (step {}, validation loss {:.6})",
            best.checkpoint.display(),
            best.step,
            best.validation_loss
        );
    } else if let Some(last) = outcome.checkpoints.last() {
        println!("last checkpoint: {}", last.path.display());
    } else {
        bail!("training finished without writing a checkpoint");
    }
    Ok(())
}

fn summarize(args: SummarizeArgs) -> Result<()> {
    let vocab = Vocabulary::load(&args.vocab)?;
    let model = load_model(&args.model, &vocab)?;
    let predictor = match &args.predictor {
        Some(path) => {
            let (p, hash) =
                AttentionPredictor::load(path).with_context(|| format!("loading predictor {}", path.display()))?;
            check_vocab(&vocab, &hash, "predictor")?;
            Some(p)
        }
        None => None,
    };
    if args.seed.is_some() {
        info!("decoding is deterministic; --seed has no effect");
    }
    let config = DecodeConfig {
        beam_size: args.beam,
        max_len: args.max_len.unwrap_or(model.config().max_target_len),
        beta: args.beta,
        scorer: args.scorer,
        constraints: Constraints {
            block_trigrams: args.block_trigrams == Switch::On,
            ..Constraints::default()
        },
        compress: args.compress_s,
        ..DecodeConfig::default()
    };
    let summarizer = Summarizer::new(&model, predictor.as_ref(), &vocab, config)?;
    let dataset = load_data(&args.data, &vocab, model.config())?;
    let records = summarizer.summarize_all(&dataset.samples, args.threads.max(1))?;
    let degenerate = records.iter().filter(|r| r.degenerate).count();
    if degenerate > 0 {
        warn!("{degenerate} summaries came from degenerate searches");
    }
    write_generations(&args.out, &records)?;
    info!("wrote {} summaries to {}", records.len(), args.out.display());
    Ok(())
}
