//! The `prme` command line: corpus ingestion, training, evaluation,
//! sampling and paintbox export.
//!
//! Every command reads a [`RunConfig`] (a JSON file, then `--set key=value`
//! overrides, then the command's own flags) and is deterministic given that
//! configuration. Exit codes: 0 success, 1 runtime failure, 2 usage or
//! configuration error.

mod config;

pub use config::{ExportConfig, Paths, PlantedSpec, RunConfig, SampleConfig, TrainMode};

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::index;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{load_uci_bow, split_corpus, Corpus, CorpusError, Document, UciCorpus, Vocabulary};
use crate::eval::{
    corpus_usage, paintbox_grid, perplexity, svd_embed, write_grid_csv, write_projections_csv, write_usage_csv,
    Embedding, EvalError,
};
use crate::model::{checkpoint_load, checkpoint_save, read_checkpoint_header, GlobalState, ModelError, TrainResume, Trainer};
use crate::paintbox::{sample_from_globals, sample_prme_corpus, PaintboxError, PlantedModel};
use crate::rng::{derive_seed, rng_for};

const STREAM_TEST_DOCS: u64 = 10;
const STREAM_PLANTED: u64 = 20;
const STREAM_SAMPLE: u64 = 21;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Invalid(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<PaintboxError> for CliError {
    fn from(e: PaintboxError) -> Self {
        match e {
            PaintboxError::Planted(_) | PaintboxError::BadSubset | PaintboxError::BadRect { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn runtime(context: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> CliError {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

#[derive(Debug, Parser)]
#[command(name = "prme", version, about = "Correlated nonparametric topic model")]
pub struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set hyper.k=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a UCI corpus and write it back normalized.
    Ingest {
        #[arg(long)]
        docword: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fit a model; writes config.json, log.jsonl, checkpoints and the test split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TrainMode>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Document-completion perplexity and topic usage of a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        split_seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Draw a synthetic corpus with its latent variables.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        docs: Option<usize>,
        #[arg(long)]
        doc_len: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Sample from a fitted model instead of the configured planted one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Topic-strength grids over the two leading code directions.
    ExportPaintbox {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Comma-separated topic ids.
        #[arg(long, value_delimiter = ',')]
        topics: Option<Vec<usize>>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        max_docs: Option<usize>,
    },
    /// Print a checkpoint's header as JSON.
    InspectCheckpoint { path: PathBuf },
    /// Print the resolved configuration as JSON.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "batch" => Ok(TrainMode::Batch),
        "stochastic" => Ok(TrainMode::Stochastic),
        _ => Err(format!("expected batch or stochastic, got {s:?}")),
    }
}

/// Parses `args` (including the program name) and runs the command, writing
/// results to `out`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Ingest { docword, vocab, out_dir } => cmd_ingest(&docword, vocab.as_deref(), &out_dir, out),
        Command::Train {
            cfg,
            corpus,
            vocab,
            out_dir,
            iters,
            seed,
            lr,
            mode,
            batch_size,
            resume,
        } => {
            let mut config = load_config(&cfg)?;
            override_opt(&mut config.paths.corpus, corpus);
            override_opt(&mut config.paths.vocab, vocab);
            override_opt(&mut config.paths.out_dir, out_dir);
            override_opt(&mut config.paths.checkpoint, resume);
            override_val(&mut config.iters, iters);
            override_val(&mut config.seed, seed);
            override_val(&mut config.lr, lr);
            override_val(&mut config.mode, mode);
            override_val(&mut config.stochastic.batch_size, batch_size);
            cmd_train(&config, out)
        }
        Command::Eval {
            cfg,
            checkpoint,
            corpus,
            split_seed,
            out_dir,
        } => {
            let mut config = load_config(&cfg)?;
            override_opt(&mut config.paths.checkpoint, checkpoint);
            override_opt(&mut config.paths.corpus, corpus);
            override_opt(&mut config.paths.out_dir, out_dir);
            override_val(&mut config.split_seed, split_seed);
            cmd_eval(&config, out)
        }
        Command::Sample {
            cfg,
            out_dir,
            docs,
            doc_len,
            seed,
            checkpoint,
        } => {
            let mut config = load_config(&cfg)?;
            override_opt(&mut config.paths.out_dir, out_dir);
            override_val(&mut config.sample.docs, docs);
            override_val(&mut config.sample.doc_len, doc_len);
            override_val(&mut config.seed, seed);
            if checkpoint.is_some() {
                config.paths.checkpoint = checkpoint;
                config.sample.planted = PlantedSpec::Checkpoint;
            }
            cmd_sample(&config, out)
        }
        Command::ExportPaintbox {
            cfg,
            checkpoint,
            corpus,
            out_dir,
            topics,
            resolution,
            max_docs,
        } => {
            let mut config = load_config(&cfg)?;
            override_opt(&mut config.paths.checkpoint, checkpoint);
            override_opt(&mut config.paths.corpus, corpus);
            override_opt(&mut config.paths.out_dir, out_dir);
            override_val(&mut config.export.topics, topics);
            override_val(&mut config.export.resolution, resolution);
            override_val(&mut config.export.max_docs, max_docs);
            cmd_export_paintbox(&config, out)
        }
        Command::InspectCheckpoint { path } => cmd_inspect_checkpoint(&path, out),
        Command::Config { cfg } => {
            let config = load_config(&cfg)?;
            writeln!(out, "{}", config.to_json()).map_err(runtime("stdout"))
        }
    }
}

fn override_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn override_val<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(require_file(path, "config file")?).map_err(runtime(path.display()))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    for s in &args.sets {
        config.set(s)?;
    }
    Ok(config)
}

fn require_file<'a>(path: &'a Path, what: &str) -> Result<&'a Path, CliError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str, flag: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("no {what} given ({flag})")))
}

fn out_dir(config: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = config.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(runtime(dir.display()))?;
    Ok(dir)
}

fn corpus_error(path: &Path, e: CorpusError) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn read_corpus(docword: &Path, vocab: Option<&Path>) -> Result<UciCorpus, CliError> {
    let file = File::open(require_file(docword, "corpus file")?).map_err(runtime(docword.display()))?;
    let vocab_reader = match vocab {
        Some(v) => Some(BufReader::new(File::open(require_file(v, "vocabulary file")?).map_err(runtime(v.display()))?)),
        None => None,
    };
    let loaded = load_uci_bow(BufReader::new(file), vocab_reader).map_err(|e| corpus_error(docword, e))?;
    if !loaded.dropped.is_empty() {
        log::warn!("{}: dropped {} empty documents", docword.display(), loaded.dropped.len());
    }
    Ok(loaded)
}

fn write_corpus(path: &Path, corpus: &Corpus) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(runtime(path.display()))?);
    corpus.write_uci(&mut w).map_err(|e| corpus_error(path, e))?;
    w.flush().map_err(runtime(path.display()))
}

fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(runtime(path.display()))?);
    vocab.write(&mut w).map_err(|e| corpus_error(path, e))?;
    w.flush().map_err(runtime(path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(runtime(path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(runtime(path.display()))?))
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(runtime("stdout"))
}

#[derive(Serialize)]
struct IngestSummary {
    docs: usize,
    words: usize,
    tokens: u64,
    dropped: Vec<usize>,
}

fn cmd_ingest(docword: &Path, vocab: Option<&Path>, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let loaded = read_corpus(docword, vocab)?;
    fs::create_dir_all(dir).map_err(runtime(dir.display()))?;
    write_corpus(&dir.join("docword.txt"), &loaded.corpus)?;
    write_vocab(&dir.join("vocab.txt"), &loaded.vocab)?;
    let summary = IngestSummary {
        docs: loaded.corpus.len(),
        words: loaded.corpus.num_words,
        tokens: loaded.corpus.num_tokens(),
        dropped: loaded.dropped,
    };
    say(out, format_args!("{}", serde_json::to_string(&summary).expect("summary serializes")))
}

/// Test documents chosen by `split_seed`; `test_fraction` of the corpus,
/// at least one when the fraction is positive and the corpus has two
/// documents.
pub fn test_document_ids(n: usize, test_fraction: f64, split_seed: u64) -> Vec<usize> {
    if test_fraction <= 0.0 || n < 2 {
        return Vec::new();
    }
    let count = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut rng = rng_for(split_seed, &[STREAM_TEST_DOCS]);
    let mut ids = index::sample(&mut rng, n, count).into_vec();
    ids.sort_unstable();
    ids
}

/// Documents long enough to split, split by `seed`.
fn heldout_splits(corpus: &Corpus, ratio: f64, seed: u64) -> Result<Vec<crate::corpus::HeldoutSplit>, CliError> {
    let usable = Corpus::new(
        corpus.num_words,
        corpus.docs.iter().filter(|d| d.len() >= 2).cloned().collect(),
    );
    split_corpus(&usable, ratio, seed).map_err(|e| CliError::Runtime(e.to_string()))
}

#[derive(Serialize)]
struct TrainSummary {
    iterations: u64,
    train_docs: usize,
    test_docs: usize,
    heldout_perplexity: Option<f64>,
}

fn cmd_train(config: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    config.validate()?;
    let corpus_path = required(&config.paths.corpus, "corpus", "--corpus or paths.corpus")?;
    let loaded = read_corpus(corpus_path, config.paths.vocab.as_deref())?;
    let dir = out_dir(config)?;
    let corpus = loaded.corpus;

    let test_ids = test_document_ids(corpus.len(), config.test_fraction, config.split_seed);
    let train_ids: Vec<usize> = (0..corpus.len()).filter(|i| test_ids.binary_search(i).is_err()).collect();
    let train = corpus.subset(&train_ids);
    let test = corpus.subset(&test_ids);
    if train.is_empty() {
        return Err(CliError::Usage(format!("{}: no training documents", corpus_path.display())));
    }
    let heldout = heldout_splits(&test, config.heldout_ratio, config.split_seed)?;
    write_json(&dir.join("config.json"), config)?;
    write_corpus(&dir.join("test_docword.txt"), &test)?;

    let train_config = config.train_config();
    let (globals, resume) = match &config.paths.checkpoint {
        Some(path) => {
            let (g, r) = checkpoint_load(require_file(path, "checkpoint")?)?;
            if g.hyper != config.hyper {
                return Err(CliError::Usage(format!(
                    "{}: checkpoint hyperparameters differ from the configuration",
                    path.display()
                )));
            }
            (g, r)
        }
        None => (Trainer::init_globals(&train, &config.hyper, &train_config)?, None),
    };
    let stochastic = (config.mode == TrainMode::Stochastic).then_some(config.stochastic);
    let mut trainer = match stochastic {
        Some(s) => Trainer::new_stochastic(&train, globals, train_config.clone(), s)?,
        None => Trainer::new(&train, globals, train_config.clone())?,
    };
    if let Some(r) = resume {
        if r.warm.len() == train.len() {
            trainer.set_warm_starts(r.warm)?;
        } else {
            log::warn!("checkpoint warm starts do not match the training documents; starting cold");
        }
    }
    if config.eval_every > 0 && !heldout.is_empty() {
        trainer = trainer.with_heldout(&heldout);
    }

    let mut log = create(&dir.join("log.jsonl"))?;
    let every = config.checkpoint_every as u64;
    let resume_of = |t: &Trainer| TrainResume {
        config: train_config.clone(),
        stochastic,
        warm: t.warm_starts().to_vec(),
    };
    trainer.run(|record, t| {
        let line = serde_json::to_string(record).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        writeln!(log, "{line}")?;
        if every > 0 && record.iteration % every == 0 {
            checkpoint_save(
                &dir.join(format!("checkpoint-{:06}.bin", record.iteration)),
                &t.globals,
                Some(&resume_of(t)),
            )?;
        }
        Ok(())
    })?;
    log.flush().map_err(runtime("log.jsonl"))?;
    checkpoint_save(&dir.join("checkpoint.bin"), &trainer.globals, Some(&resume_of(&trainer)))?;

    let ppl = if heldout.is_empty() {
        None
    } else {
        Some(perplexity(&trainer.globals, &heldout, &config.local)?)
    };
    write_json(
        &dir.join("summary.json"),
        &TrainSummary {
            iterations: trainer.globals.iteration,
            train_docs: train.len(),
            test_docs: test.len(),
            heldout_perplexity: ppl,
        },
    )?;
    match ppl {
        Some(p) => say(out, format_args!("heldout_perplexity {p}")),
        None => say(out, format_args!("heldout_perplexity none")),
    }
}

fn load_checkpoint(config: &RunConfig) -> Result<GlobalState, CliError> {
    let path = required(&config.paths.checkpoint, "checkpoint", "--checkpoint or paths.checkpoint")?;
    Ok(checkpoint_load(require_file(path, "checkpoint")?)?.0)
}

fn load_matching_corpus(config: &RunConfig, globals: &GlobalState) -> Result<Corpus, CliError> {
    let path = required(&config.paths.corpus, "corpus", "--corpus or paths.corpus")?;
    let corpus = read_corpus(path, config.paths.vocab.as_deref())?.corpus;
    if corpus.num_words != globals.num_words {
        return Err(CliError::Usage(format!(
            "{}: corpus has {} terms, model has {}",
            path.display(),
            corpus.num_words,
            globals.num_words
        )));
    }
    Ok(corpus)
}

fn cmd_eval(config: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    config.validate()?;
    let globals = load_checkpoint(config)?;
    let corpus = load_matching_corpus(config, &globals)?;
    let dir = out_dir(config)?;
    let heldout = heldout_splits(&corpus, config.heldout_ratio, config.split_seed)?;
    let ppl = perplexity(&globals, &heldout, &config.local)?;
    let usage = corpus_usage(&globals, &corpus, &config.local)?;
    let path = dir.join("usage.csv");
    let mut w = create(&path)?;
    write_usage_csv(&usage, &mut w).map_err(runtime(path.display()))?;
    w.flush().map_err(runtime(path.display()))?;
    say(out, format_args!("perplexity {ppl}"))?;
    say(out, format_args!("usage {}", path.display()))
}

fn cmd_sample(config: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = out_dir(config)?;
    let s = &config.sample;
    let sample_seed = derive_seed(config.seed, &[STREAM_SAMPLE]);
    let mut rng = rng_for(config.seed, &[STREAM_PLANTED]);
    let (corpus, truth) = match &s.planted {
        PlantedSpec::TwoGroups {
            k,
            num_words,
            beta,
            gamma0,
            scale,
            var,
        } => {
            let model = PlantedModel::two_groups(*k, *num_words, *beta, *gamma0, *scale, *var, &mut rng)?;
            sample_prme_corpus(&model, s.docs, s.doc_len, sample_seed)?
        }
        PlantedSpec::Prior {
            k,
            num_words,
            alpha,
            beta,
            gamma0,
            dim,
            ell_prior_var,
            decoder,
        } => {
            let model = PlantedModel::from_prior(
                *k,
                *num_words,
                *alpha,
                *beta,
                *gamma0,
                *dim,
                *ell_prior_var,
                decoder.clone(),
                &mut rng,
            )?;
            sample_prme_corpus(&model, s.docs, s.doc_len, sample_seed)?
        }
        PlantedSpec::Checkpoint => {
            let globals = load_checkpoint(config)?;
            sample_from_globals(&globals, s.docs, s.doc_len, sample_seed)?
        }
    };
    write_corpus(&dir.join("docword.txt"), &corpus)?;
    write_vocab(&dir.join("vocab.txt"), &Vocabulary::synthetic(corpus.num_words))?;
    write_json(&dir.join("truth.json"), &truth)?;
    say(
        out,
        format_args!("sampled {} documents over {} terms into {}", corpus.len(), corpus.num_words, dir.display()),
    )
}

#[derive(Serialize)]
struct EmbeddingExport<'a> {
    embedding: &'a Embedding,
    range: (f64, f64),
    resolution: usize,
    topics: &'a [usize],
    docs: usize,
}

fn cmd_export_paintbox(config: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    config.validate()?;
    let globals = load_checkpoint(config)?;
    let corpus = load_matching_corpus(config, &globals)?;
    let k = globals.k();
    if let Some(&bad) = config.export.topics.iter().find(|&&t| t >= k) {
        return Err(CliError::Usage(format!("topic {bad} out of range: the model has K = {k} topics")));
    }
    let n = match config.export.max_docs {
        0 => corpus.len(),
        m => m.min(corpus.len()),
    };
    let subset = corpus.subset(&(0..n).collect::<Vec<_>>());
    let docs: Vec<&Document> = subset.docs.iter().collect();
    let dir = out_dir(config)?;

    let codes = globals.encode(&docs)?;
    let embedding = if codes.cols() == 0 { Embedding::empty() } else { svd_embed(&codes)? };
    let usage = corpus_usage(&globals, &subset, &config.local)?;
    let topics: Vec<usize> = if config.export.topics.is_empty() {
        usage.iter().take(10).map(|u| u.topic).collect()
    } else {
        config.export.topics.clone()
    };

    for &t in &topics {
        let grid = paintbox_grid(&globals, &embedding, t, config.export.range, config.export.resolution)?;
        let path = dir.join(format!("grid-{t:03}.csv"));
        let mut w = create(&path)?;
        write_grid_csv(&grid, &mut w).map_err(runtime(path.display()))?;
        w.flush().map_err(runtime(path.display()))?;
    }
    let points: Vec<(usize, f64, f64)> = (0..docs.len())
        .map(|i| {
            let (x, y) = embedding.project(codes.row(i));
            (i, x, y)
        })
        .collect();
    let path = dir.join("projections.csv");
    let mut w = create(&path)?;
    write_projections_csv(&points, &mut w).map_err(runtime(path.display()))?;
    w.flush().map_err(runtime(path.display()))?;
    let path = dir.join("usage.csv");
    let mut w = create(&path)?;
    write_usage_csv(&usage, &mut w).map_err(runtime(path.display()))?;
    w.flush().map_err(runtime(path.display()))?;
    write_json(
        &dir.join("embedding.json"),
        &EmbeddingExport {
            embedding: &embedding,
            range: config.export.range,
            resolution: config.export.resolution,
            topics: &topics,
            docs: docs.len(),
        },
    )?;
    say(
        out,
        format_args!("exported {} grids over {} documents into {}", topics.len(), docs.len(), dir.display()),
    )
}

fn cmd_inspect_checkpoint(path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let header = read_checkpoint_header(require_file(path, "checkpoint")?)?;
    let text = serde_json::to_string_pretty(&header).map_err(|e| CliError::Runtime(e.to_string()))?;
    say(out, format_args!("{text}"))
}
