//! The `gosum` command line: preprocess, oracle, train, extract, evaluate,
//! ablate and synth.
//!
//! Exit status is 0 on success, 1 for usage or configuration errors and 2
//! when input data cannot be used.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use gosum::corpus::{
    load_corpus, load_embedding_table, write_corpus, EmbeddingTable, StructuredDocument, Vocabulary,
};
use gosum::evalrun::{self, ablate, prepare, Condition, Evaluation};
use gosum::oracle::{LabelStore, OracleConfig};
use gosum::synth::{self, SynthConfig};
use gosum::trainer::{self, Checkpoint, FileObserver, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "gosum",
    version,
    about = "Discourse-aware extractive summarization"
)]
struct Cli {
    /// TOML configuration file; flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalise a raw corpus and optionally build a vocabulary
    Preprocess(PreprocessArgs),
    /// Generate beam-search oracle labels
    Oracle(OracleArgs),
    /// Train a model against stored labels
    Train(TrainArgs),
    /// Extract summaries with a trained model
    Extract(ExtractArgs),
    /// Score a model or a baseline against reference abstracts
    Evaluate(EvaluateArgs),
    /// Train and evaluate under ablation conditions
    Ablate(AblateArgs),
    /// Write a synthetic corpus
    Synth(SynthArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Preset {
    Pubmed,
    Arxiv,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    limit: Option<usize>,
    /// Also write the corpus vocabulary as a JSON token list
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    vocab_cap: Option<usize>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    max_labels: Option<usize>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Word vector file (`token v1 .. vd` per line); random vectors otherwise
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    vocab_cap: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Train with every sample's reward set to 1
    #[arg(long)]
    no_reward: bool,
    /// Subtract the batch-mean reward
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    word_dim: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    global_width: Option<usize>,
    #[arg(long)]
    lstm_hidden: Option<usize>,
    #[arg(long)]
    history_layers: Option<usize>,
    #[arg(long)]
    no_graph: bool,
    #[arg(long)]
    no_sec2sec: bool,
    #[arg(long)]
    train_embeddings: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Final checkpoint; its configuration goes to `<out>.json`
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Training log, one JSON object per update [default: <out>.log.jsonl]
    #[arg(long)]
    log: Option<PathBuf>,
    /// Directory for intermediate checkpoints
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Stop threshold [default: the checkpoint's]
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Model to evaluate; not needed with --baseline
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `lead:K`, `random` (lengths from --lengths-from or 3) or `oracle`
    #[arg(long)]
    baseline: Option<String>,
    /// Label store, for the oracle baseline
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Results file whose extraction lengths the random baseline copies
    #[arg(long)]
    lengths_from: Option<PathBuf>,
    /// Per-document results
    #[arg(long)]
    out: PathBuf,
    /// Corpus-level report [default: <out>.report.json]
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long = "eval")]
    eval: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// base, scramble:RATE, mask_titles, no_reward, top_k:K, no_graph or
    /// no_sec2sec; repeat for several
    #[arg(long = "condition", required = true)]
    conditions: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    docs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Contents of the `--config` file. Every table is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    oracle: OracleConfig,
    train: TrainConfig,
    synth: SynthConfig,
    embeddings: EmbeddingSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EmbeddingSettings {
    path: Option<PathBuf>,
    vocab_cap: usize,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        Self {
            path: None,
            vocab_cap: 50_000,
        }
    }
}

enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<gosum::GosumError> for Failure {
    fn from(e: gosum::GosumError) -> Self {
        Failure::Data(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(message: impl Into<String>) -> Failure {
    Failure::Usage(message.into())
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("\nFor more information, try '--help'.");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str(&text)
                .map_err(|e| usage(format!("bad configuration file {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let started = Instant::now();
    let mut manifest = RunManifest::new(&cli);
    let primary = match cli.command {
        Command::Preprocess(a) => preprocess(a, &file, &mut manifest)?,
        Command::Oracle(a) => oracle(a, &file, &mut manifest)?,
        Command::Train(a) => train(a, &file, &mut manifest)?,
        Command::Extract(a) => extract(a, &mut manifest)?,
        Command::Evaluate(a) => evaluate(a, &mut manifest)?,
        Command::Ablate(a) => run_ablation(a, &file, &mut manifest)?,
        Command::Synth(a) => synthesize(a, &file, &mut manifest)?,
    };
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write_next_to(&primary)?;
    Ok(())
}

/// Record of one invocation, written next to its main output.
#[derive(Debug, Serialize)]
struct RunManifest {
    subcommand: String,
    config: serde_json::Value,
    config_file: Option<PathBuf>,
    inputs: BTreeMap<String, PathBuf>,
    outputs: BTreeMap<String, PathBuf>,
    seed: Option<u64>,
    version: String,
    git: Option<String>,
    started_unix: u64,
    wall_clock_seconds: f64,
}

impl RunManifest {
    fn new(cli: &Cli) -> Self {
        let subcommand = match cli.command {
            Command::Preprocess(_) => "preprocess",
            Command::Oracle(_) => "oracle",
            Command::Train(_) => "train",
            Command::Extract(_) => "extract",
            Command::Evaluate(_) => "evaluate",
            Command::Ablate(_) => "ablate",
            Command::Synth(_) => "synth",
        };
        Self {
            subcommand: subcommand.into(),
            config: serde_json::Value::Null,
            config_file: cli.config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed: None,
            version: env!("CARGO_PKG_VERSION").into(),
            git: option_env!("GOSUM_GIT_REV").map(str::to_owned),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            wall_clock_seconds: 0.0,
        }
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.into(), path.to_owned());
    }

    fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.into(), path.to_owned());
    }

    fn set_config(&mut self, config: &impl Serialize) -> CliResult<()> {
        self.config = serde_json::to_value(config).map_err(|e| Failure::Data(e.into()))?;
        Ok(())
    }

    fn write_next_to(&self, output: &Path) -> CliResult<()> {
        let path = manifest_path(output);
        write_atomic(&path, |w| {
            serde_json::to_writer_pretty(&mut *w, self)?;
            w.write_all(b"\n")?;
            Ok(())
        })
        .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(())
    }
}

/// `<output>.manifest.json`
pub fn manifest_path(output: &Path) -> PathBuf {
    with_suffix(output, ".manifest.json")
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_atomic(
    path: &Path,
    write: impl FnOnce(&mut BufWriter<File>) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    let tmp = with_suffix(path, ".tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
    .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_corpus(path: &Path) -> CliResult<Vec<StructuredDocument>> {
    let corpus =
        load_corpus(path, None).with_context(|| format!("reading corpus {}", path.display()))?;
    if corpus.skipped > 0 {
        log::warn!(
            "{}: {} records without sentences skipped",
            path.display(),
            corpus.skipped
        );
    }
    Ok(corpus.documents)
}

fn apply_preset(
    preset: Option<Preset>,
    oracle: &mut OracleConfig,
    train: Option<&mut TrainConfig>,
) {
    let Some(preset) = preset else { return };
    let (base, threshold) = match preset {
        Preset::Pubmed => (OracleConfig::pubmed(), 0.6),
        Preset::Arxiv => (OracleConfig::arxiv(), 0.45),
    };
    oracle.max_len = base.max_len;
    if let Some(t) = train {
        t.max_len = base.max_len;
        t.threshold = threshold;
    }
}

fn preprocess(
    a: PreprocessArgs,
    file: &FileConfig,
    manifest: &mut RunManifest,
) -> CliResult<PathBuf> {
    let corpus =
        load_corpus(&a.input, a.limit).with_context(|| format!("reading {}", a.input.display()))?;
    write_corpus(&a.out, &corpus.documents)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let cap = a.vocab_cap.unwrap_or(file.embeddings.vocab_cap);
    manifest.input("input", &a.input);
    manifest.output("corpus", &a.out);
    if let Some(path) = &a.vocab {
        let vocab = Vocabulary::from_documents(&corpus.documents, cap);
        write_json(path, &vocab)?;
        manifest.output("vocab", path);
    }
    manifest.set_config(&serde_json::json!({ "limit": a.limit, "vocab_cap": cap }))?;
    println!(
        "{} documents ({} skipped, {} sentences truncated), {:.1} sentences per document",
        corpus.documents.len(),
        corpus.skipped,
        corpus.truncated_sentences,
        corpus.mean_sentences()
    );
    Ok(a.out)
}

fn oracle(a: OracleArgs, file: &FileConfig, manifest: &mut RunManifest) -> CliResult<PathBuf> {
    let mut config = file.oracle;
    apply_preset(a.preset, &mut config, None);
    if let Some(v) = a.max_len {
        config.max_len = v;
    }
    if let Some(v) = a.max_labels {
        config.max_labels = v;
    }
    if let Some(v) = a.beam_width {
        config.beam_width = v;
    }
    if config.max_len == 0 || config.max_labels == 0 || config.beam_width < config.max_labels {
        return Err(usage(format!(
            "need beam width >= max labels >= 1 and max length >= 1, got {config:?}"
        )));
    }
    let docs = read_corpus(&a.corpus)?;
    let store = LabelStore::generate(&docs, &config, a.workers)?;
    store
        .write(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    manifest.set_config(&config)?;
    manifest.input("corpus", &a.corpus);
    manifest.output("labels", &a.out);
    println!(
        "{} samples for {} documents",
        store.num_samples(),
        store.num_docs()
    );
    Ok(a.out)
}

/// Training configuration from defaults, the file, then flags.
fn train_config(
    flags: &TrainFlags,
    file: &FileConfig,
) -> CliResult<(TrainConfig, EmbeddingSettings)> {
    let mut c = file.train.clone();
    let mut oracle = file.oracle;
    apply_preset(flags.preset, &mut oracle, Some(&mut c));
    let mut emb = file.embeddings.clone();
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(c.epochs, flags.epochs);
    set!(c.learning_rate, flags.lr);
    set!(c.batch_size, flags.batch_size);
    set!(c.seed, flags.seed);
    set!(c.checkpoint_interval, flags.checkpoint_interval);
    set!(c.threshold, flags.threshold);
    set!(c.max_len, flags.max_len);
    set!(c.workers, flags.workers);
    set!(c.model.word_dim, flags.word_dim);
    set!(c.model.width, flags.width);
    set!(c.model.global_width, flags.global_width);
    set!(c.model.lstm_hidden, flags.lstm_hidden);
    set!(c.model.history_layers, flags.history_layers);
    set!(emb.vocab_cap, flags.vocab_cap);
    if flags.top_k.is_some() {
        c.top_k = flags.top_k;
    }
    if flags.embeddings.is_some() {
        emb.path = flags.embeddings.clone();
    }
    c.reward_ablation |= flags.no_reward;
    c.reward_baseline |= flags.baseline;
    c.model.train_embeddings |= flags.train_embeddings;
    if flags.no_graph {
        c.model.use_graph = false;
    }
    if flags.no_sec2sec {
        c.model.use_sec2sec = false;
    }
    Ok((c, emb))
}

/// Pretrained vectors when configured, otherwise seeded random vectors over
/// the training corpus vocabulary. Fixes `word_dim` to the table width.
fn embedding_table(
    settings: &EmbeddingSettings,
    config: &mut TrainConfig,
    train_docs: &[StructuredDocument],
) -> CliResult<EmbeddingTable> {
    match &settings.path {
        Some(path) => {
            let table = load_embedding_table(path, settings.vocab_cap)
                .with_context(|| format!("reading embeddings {}", path.display()))?;
            config.model.word_dim = table.dim();
            Ok(table)
        }
        None => {
            let vocab = Vocabulary::from_documents(train_docs, settings.vocab_cap);
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            Ok(EmbeddingTable::random(
                vocab,
                config.model.word_dim,
                &mut rng,
            ))
        }
    }
}

fn train(a: TrainArgs, file: &FileConfig, manifest: &mut RunManifest) -> CliResult<PathBuf> {
    let (mut config, emb) = train_config(&a.flags, file)?;
    config.validate().map_err(|e| usage(e.to_string()))?;
    let docs = read_corpus(&a.corpus)?;
    let (store, dropped) = LabelStore::read_for_corpus(&a.labels, &docs)
        .with_context(|| format!("reading labels {}", a.labels.display()))?;
    if dropped > 0 {
        log::warn!("{dropped} label samples refer to documents outside the corpus");
    }
    let table = embedding_table(&emb, &mut config, &docs)?;
    let initial = Checkpoint::initial(config.clone(), table)?;
    let train_set = prepare(&docs, &initial.model.vocab);
    let validation = match &a.validation {
        Some(path) => prepare(&read_corpus(path)?, &initial.model.vocab),
        None => Vec::new(),
    };
    if let Some(dir) = &a.checkpoint_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| with_suffix(&a.out, ".log.jsonl"));
    let log_file =
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut observer = FileObserver {
        log: BufWriter::new(log_file),
        checkpoint_dir: a.checkpoint_dir.clone(),
    };
    let outcome = trainer::train(initial, &train_set, &store, &validation, &mut observer)?;
    observer.log.flush().context("writing training log")?;
    outcome
        .checkpoint
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;

    manifest.set_config(&serde_json::json!({ "train": config, "embeddings": emb }))?;
    manifest.seed = Some(config.seed);
    manifest.input("corpus", &a.corpus);
    manifest.input("labels", &a.labels);
    if let Some(p) = &a.validation {
        manifest.input("validation", p);
    }
    if let Some(p) = &emb.path {
        manifest.input("embeddings", p);
    }
    manifest.output("checkpoint", &a.out);
    manifest.output("checkpoint_config", &trainer::sidecar_path(&a.out));
    manifest.output("log", &log_path);
    let last = outcome.checkpoint.validation.last();
    println!(
        "{} updates, {} documents skipped{}",
        outcome.checkpoint.step,
        outcome.skipped,
        last.map_or(String::new(), |v| format!(
            ", validation reward {:.4}",
            v.mean_reward
        ))
    );
    Ok(a.out)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?)
}

fn check_decoding(threshold: f64, max_len: usize) -> CliResult<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(usage(format!("threshold {threshold} outside [0, 1]")));
    }
    if max_len == 0 {
        return Err(usage("max length must be at least 1"));
    }
    Ok(())
}

fn extract(a: ExtractArgs, manifest: &mut RunManifest) -> CliResult<PathBuf> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let threshold = a.threshold.unwrap_or(ckpt.config.threshold);
    let max_len = a.max_len.unwrap_or(ckpt.config.max_len);
    check_decoding(threshold, max_len)?;
    let docs = prepare(&read_corpus(&a.corpus)?, &ckpt.model.vocab);
    let results = evalrun::extract_all(&ckpt.model, &docs, threshold, max_len, a.workers)?;
    evalrun::write_results(&a.out, &results)
        .with_context(|| format!("writing {}", a.out.display()))?;
    manifest.set_config(&serde_json::json!({ "threshold": threshold, "max_len": max_len }))?;
    manifest.input("corpus", &a.corpus);
    manifest.input("checkpoint", &a.checkpoint);
    manifest.output("results", &a.out);
    println!("{} documents extracted", results.len());
    Ok(a.out)
}

#[derive(Serialize)]
struct EvaluationReport {
    system: String,
    documents: usize,
    threshold: Option<f64>,
    max_len: Option<usize>,
    r1: f64,
    r2: f64,
    rl: f64,
    mean_reward: f64,
    mean_length: f64,
}

fn evaluate(a: EvaluateArgs, manifest: &mut RunManifest) -> CliResult<PathBuf> {
    manifest.input("corpus", &a.corpus);
    let raw = read_corpus(&a.corpus)?;
    let (system, evaluation, threshold, max_len): (String, Evaluation, _, _) =
        match (&a.baseline, &a.checkpoint) {
            (Some(_), Some(_)) => {
                return Err(usage("give either --checkpoint or --baseline, not both"))
            }
            (None, None) => return Err(usage("one of --checkpoint or --baseline is required")),
            (None, Some(path)) => {
                let ckpt = load_checkpoint(path)?;
                manifest.input("checkpoint", path);
                let threshold = a.threshold.unwrap_or(ckpt.config.threshold);
                let max_len = a.max_len.unwrap_or(ckpt.config.max_len);
                check_decoding(threshold, max_len)?;
                let docs = prepare(&raw, &ckpt.model.vocab);
                let eval = evalrun::evaluate(&ckpt.model, &docs, threshold, max_len, a.workers)?;
                ("model".into(), eval, Some(threshold), Some(max_len))
            }
            (Some(name), None) => {
                let docs = prepare(&raw, &Vocabulary::from_tokens(Vec::new()));
                let eval = match name.split_once(':') {
                    Some(("lead", k)) => {
                        let k: usize = k
                            .parse()
                            .map_err(|_| usage(format!("bad lead size in {name:?}")))?;
                        evalrun::lead_baseline(&docs, k)?
                    }
                    None if name == "random" => {
                        let lengths = match &a.lengths_from {
                            Some(path) => {
                                manifest.input("lengths_from", path);
                                lengths_from(path, &docs)?
                            }
                            None => vec![3; docs.len()],
                        };
                        evalrun::random_baseline(&docs, &lengths, a.seed)?
                    }
                    None if name == "oracle" => {
                        let path = a
                            .labels
                            .as_ref()
                            .ok_or_else(|| usage("the oracle baseline needs --labels"))?;
                        manifest.input("labels", path);
                        let (store, _) = LabelStore::read_for_corpus(path, &raw)
                            .with_context(|| format!("reading labels {}", path.display()))?;
                        evalrun::oracle_replay(&docs, &store)?
                    }
                    _ => return Err(usage(format!("unknown baseline {name:?}"))),
                };
                (name.clone(), eval, None, None)
            }
        };
    evalrun::write_results(&a.out, &evaluation.results)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| with_suffix(&a.out, ".report.json"));
    let report = EvaluationReport {
        system,
        documents: evaluation.results.len(),
        threshold,
        max_len,
        r1: evaluation.mean.r1_f,
        r2: evaluation.mean.r2_f,
        rl: evaluation.mean.rl_f,
        mean_reward: evaluation.mean_reward(),
        mean_length: evaluation.mean_length(),
    };
    write_json(&report_path, &report)?;
    manifest.set_config(&serde_json::json!({
        "baseline": a.baseline, "threshold": threshold, "max_len": max_len, "seed": a.seed
    }))?;
    manifest.seed = Some(a.seed);
    manifest.output("results", &a.out);
    manifest.output("report", &report_path);
    println!(
        "R-1 {:.4}  R-2 {:.4}  R-L {:.4}  over {} documents",
        report.r1, report.r2, report.rl, report.documents
    );
    Ok(a.out)
}

fn lengths_from(path: &Path, docs: &[evalrun::PreparedDoc]) -> CliResult<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut by_id = BTreeMap::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let r: evalrun::ExtractionResult =
            serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        by_id.insert(r.doc_id, r.indices.len());
    }
    docs.iter()
        .map(|d| {
            by_id.get(d.id()).copied().ok_or_else(|| {
                Failure::Data(anyhow!(
                    "{} has no result for document {}",
                    path.display(),
                    d.id()
                ))
            })
        })
        .collect()
}

fn run_ablation(
    a: AblateArgs,
    file: &FileConfig,
    manifest: &mut RunManifest,
) -> CliResult<PathBuf> {
    let conditions = a
        .conditions
        .iter()
        .map(|c| c.parse::<Condition>().map_err(|e| usage(e.to_string())))
        .collect::<CliResult<Vec<_>>>()?;
    if a.seeds.is_empty() {
        return Err(usage("at least one seed is needed"));
    }
    let (mut config, emb) = train_config(&a.flags, file)?;
    config.validate().map_err(|e| usage(e.to_string()))?;
    let train_docs = read_corpus(&a.train)?;
    let eval_docs = read_corpus(&a.eval)?;
    let (store, _) = LabelStore::read_for_corpus(&a.labels, &train_docs)
        .with_context(|| format!("reading labels {}", a.labels.display()))?;
    let table = embedding_table(&emb, &mut config, &train_docs)?;
    let mut reports = Vec::with_capacity(conditions.len());
    for condition in conditions {
        let report = ablate(
            &train_docs,
            &eval_docs,
            &store,
            &table,
            &config,
            condition,
            &a.seeds,
        )?;
        println!(
            "{:<16} mean reward {:.4}",
            report.condition, report.mean_reward
        );
        reports.push(report);
    }
    write_json(&a.out, &reports)?;
    manifest.set_config(&serde_json::json!({
        "train": config, "embeddings": emb, "conditions": a.conditions, "seeds": a.seeds
    }))?;
    manifest.input("train", &a.train);
    manifest.input("eval", &a.eval);
    manifest.input("labels", &a.labels);
    manifest.output("report", &a.out);
    Ok(a.out)
}

fn synthesize(a: SynthArgs, file: &FileConfig, manifest: &mut RunManifest) -> CliResult<PathBuf> {
    let mut config = file.synth.clone();
    if let Some(d) = a.docs {
        config.docs = d;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let docs = synth::generate(&config).map_err(|e| usage(e.to_string()))?;
    write_corpus(&a.out, &docs).with_context(|| format!("writing {}", a.out.display()))?;
    manifest.set_config(&config)?;
    manifest.seed = Some(config.seed);
    manifest.output("corpus", &a.out);
    println!("{} documents written", docs.len());
    Ok(a.out)
}
