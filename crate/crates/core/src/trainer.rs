//! Reward-weighted teacher-forced training against stored oracle labels,
//! and checkpoints.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingTable, TokenizedDocument, Vocabulary};
use crate::error::{GosumError, Result};
use crate::evalrun::{evaluate, PreparedDoc};
use crate::history::ExtractionContext;
use crate::model::{GosumModel, ModelConfig};
use crate::oracle::{LabelStore, LabeledSample};
use crate::params::{Adam, AdamConfig, Gradients, ParamStore};
use crate::policy::{step_log_likelihood, Action};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    /// Documents per parameter update.
    pub batch_size: usize,
    /// Validate and checkpoint every this many updates; 0 only at the end.
    pub checkpoint_interval: u64,
    pub seed: u64,
    /// Train with every sample's reward replaced by 1.
    pub reward_ablation: bool,
    /// Draw training labels only from each document's `k` best.
    pub top_k: Option<usize>,
    /// Subtract the batch-mean reward from each sample's reward.
    pub reward_baseline: bool,
    /// Stop threshold used for validation extraction.
    pub threshold: f64,
    pub max_len: usize,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            model: ModelConfig::default(),
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            epochs: 20,
            batch_size: 8,
            checkpoint_interval: 10_000,
            seed: 0,
            reward_ablation: false,
            top_k: None,
            reward_baseline: false,
            threshold: 0.6,
            max_len: 7,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GosumError::InvalidArgument(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "moment coefficients must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if self.epsilon <= 0.0 {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.top_k == Some(0) {
            return bad("top_k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("stop threshold {} outside [0, 1]", self.threshold));
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1".into());
        }
        self.model.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

fn check_labels(doc: &TokenizedDocument, labels: &[usize]) -> Result<()> {
    let n = doc.num_sentences();
    let mut seen = vec![false; n];
    for &y in labels {
        if y >= n {
            return Err(GosumError::Document {
                doc_id: doc.doc_id.clone(),
                message: format!("label {y} out of range for {n} sentences"),
            });
        }
        if std::mem::replace(&mut seen[y], true) {
            return Err(GosumError::Document {
                doc_id: doc.doc_id.clone(),
                message: format!("label {y} repeated"),
            });
        }
    }
    Ok(())
}

/// `-r * sum_t log pi(y_t)`, plus the stop action after the last label when
/// sentences remain.
pub fn iteration_loss(
    tape: &mut Tape,
    model: &GosumModel,
    doc: &TokenizedDocument,
    labels: &[usize],
    reward: f64,
) -> Result<Var> {
    check_labels(doc, labels)?;
    let enc = model.encode(tape, doc)?;
    let mut ctx = ExtractionContext::new(doc.num_sentences());
    let mut terms = Vec::with_capacity(labels.len() + 1);
    for &y in labels {
        let vars = model.step(tape, &enc, &ctx)?;
        terms.push(step_log_likelihood(tape, vars, Action::Extract(y), &ctx)?);
        ctx.extract(y)?;
    }
    if !ctx.remaining().is_empty() {
        let vars = model.step(tape, &enc, &ctx)?;
        terms.push(step_log_likelihood(tape, vars, Action::Stop, &ctx)?);
    }
    let total = tape.add_scalars(&terms);
    Ok(tape.scale(total, -reward))
}

/// Loss and parameter gradients of one labelled trajectory.
pub fn train_iteration(
    model: &GosumModel,
    doc: &TokenizedDocument,
    labels: &[usize],
    reward: f64,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new(&model.params);
    let loss = iteration_loss(&mut tape, model, doc, labels, reward)?;
    Ok((tape.scalar(loss), tape.backward(loss)))
}

/// Analytic gradients of [`iteration_loss`] against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    /// Largest `|a - n| / max(|a| + |n|, noise)` over parameter tensors,
    /// norms taken over each tensor's entries. `noise` is the rounding error
    /// bound of the difference quotient, so tensors whose true gradient is
    /// zero do not count as mismatches.
    pub max_relative_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

pub fn gradient_check(
    model: &GosumModel,
    doc: &TokenizedDocument,
    labels: &[usize],
    reward: f64,
    h: f64,
) -> Result<GradientCheck> {
    let (loss, grads) = train_iteration(model, doc, labels, reward)?;
    let noise_per_entry = 10.0 * f64::EPSILON * loss.abs().max(1.0) / h;
    let mut probe = model.clone();
    let mut out = GradientCheck {
        max_relative_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for id in model
        .params
        .ids()
        .filter(|&id| model.params.is_trainable(id))
    {
        let value = model.params.value(id);
        let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
        for (index, &orig) in value.indexed_iter() {
            probe.params.value_mut(id)[index] = orig + h;
            let up = train_iteration(&probe, doc, labels, reward)?.0;
            probe.params.value_mut(id)[index] = orig - h;
            let down = train_iteration(&probe, doc, labels, reward)?.0;
            probe.params.value_mut(id)[index] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g[index]);
            diff += (numeric - analytic) * (numeric - analytic);
            norm_a += analytic * analytic;
            norm_n += numeric * numeric;
            out.checked += 1;
        }
        let noise = noise_per_entry * (value.len() as f64).sqrt();
        let err = diff.sqrt() / (norm_a.sqrt() + norm_n.sqrt()).max(noise);
        if err > out.max_relative_error {
            out.max_relative_error = err;
            out.worst_param = model.params.name(id).to_owned();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub mean_reward: f64,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub mean_reward: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: GosumModel,
    pub step: u64,
    pub config: TrainConfig,
    pub validation: Vec<ValidationRecord>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    version: u32,
    step: u64,
    config: TrainConfig,
    vocab: Vocabulary,
    validation: Vec<ValidationRecord>,
}

const CHECKPOINT_FORMAT: &str = "gosum-checkpoint";

/// Path of the JSON file stored next to a checkpoint's parameter file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Checkpoint {
    /// Freshly initialised model, step 0.
    pub fn initial(config: TrainConfig, embeddings: EmbeddingTable) -> Result<Self> {
        config.validate()?;
        let model = GosumModel::new(config.model.clone(), embeddings, config.seed)?;
        Ok(Self {
            model,
            step: 0,
            config,
            validation: Vec::new(),
        })
    }

    /// Parameters to `path`, everything else to `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| Ok(self.model.params.write_to(w)?))?;
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            step: self.step,
            config: self.config.clone(),
            vocab: self.model.vocab.clone(),
            validation: self.validation.clone(),
        };
        write_atomic(&sidecar_path(path), |w| {
            serde_json::to_writer_pretty(&mut *w, &meta)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
        if meta.format != CHECKPOINT_FORMAT || meta.version != 1 {
            return Err(GosumError::Checkpoint(format!(
                "unsupported checkpoint format {} v{}",
                meta.format, meta.version
            )));
        }
        let params = ParamStore::read_from(&mut BufReader::new(File::open(path)?))?;
        let model = GosumModel::from_parts(meta.config.model.clone(), meta.vocab, params)?;
        Ok(Self {
            model,
            step: meta.step,
            config: meta.config,
            validation: meta.validation,
        })
    }
}

/// Receives training progress. Both methods default to doing nothing.
pub trait TrainObserver {
    fn on_step(&mut self, _log: &StepLog) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Writes each step as a JSON line and saves checkpoints to a directory.
pub struct FileObserver<W: Write> {
    pub log: W,
    pub checkpoint_dir: Option<PathBuf>,
}

impl<W: Write> TrainObserver for FileObserver<W> {
    fn on_step(&mut self, log: &StepLog) -> Result<()> {
        serde_json::to_writer(&mut self.log, log)?;
        self.log.write_all(b"\n")?;
        Ok(())
    }

    fn on_checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        self.log.flush()?;
        if let Some(dir) = &self.checkpoint_dir {
            checkpoint.save(&dir.join(format!("step-{:08}.ckpt", checkpoint.step)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Training documents without any stored label.
    pub skipped: usize,
}

fn validate_into(checkpoint: &mut Checkpoint, validation: &[PreparedDoc]) -> Result<()> {
    if validation.is_empty() {
        return Ok(());
    }
    let c = &checkpoint.config;
    let eval = evaluate(
        &checkpoint.model,
        validation,
        c.threshold,
        c.max_len,
        c.workers,
    )?;
    log::info!(
        "step {}: validation reward {:.4}",
        checkpoint.step,
        eval.mean_reward()
    );
    checkpoint.validation.push(ValidationRecord {
        step: checkpoint.step,
        mean_reward: eval.mean_reward(),
        r1: eval.mean.r1_f,
        r2: eval.mean.r2_f,
        rl: eval.mean.rl_f,
    });
    Ok(())
}

/// Runs `epochs` passes over the documents that have stored labels. Each
/// pass visits them in a seeded random order; each visit trains on one
/// label sequence drawn uniformly from the document's best `top_k`.
/// Gradients are averaged over `batch_size` documents per update.
pub fn train(
    mut checkpoint: Checkpoint,
    docs: &[PreparedDoc],
    store: &LabelStore,
    validation: &[PreparedDoc],
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let config = checkpoint.config.clone();
    config.validate()?;
    if checkpoint.model.config != config.model {
        return Err(GosumError::Checkpoint(
            "checkpoint model does not match its training configuration".into(),
        ));
    }
    let usable: Vec<usize> = (0..docs.len())
        .filter(|&i| !store.get(docs[i].id()).is_empty())
        .collect();
    let skipped = docs.len() - usable.len();
    if skipped > 0 {
        log::warn!("{skipped} training documents have no stored labels and are skipped");
    }
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            checkpoint,
            skipped,
        });
    }
    if usable.is_empty() {
        return Err(GosumError::Empty(
            "no training document has stored labels".into(),
        ));
    }

    let pool = crate::worker_pool(config.workers)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let mut label_rng = ChaCha8Rng::seed_from_u64(config.seed);
    label_rng.set_stream(2);
    let mut adam = Adam::new(config.adam(), &checkpoint.model.params);
    let mut last_validated = None;

    for epoch in 0..config.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut order_rng);
        for batch in order.chunks(config.batch_size) {
            let picks: Vec<(&PreparedDoc, &LabeledSample)> = batch
                .iter()
                .map(|&i| {
                    let samples = store.get(docs[i].id());
                    let k = config.top_k.map_or(samples.len(), |k| k.min(samples.len()));
                    (&docs[i], &samples[label_rng.gen_range(0..k)])
                })
                .collect();
            let mut rewards: Vec<f64> = picks
                .iter()
                .map(|(_, s)| {
                    if config.reward_ablation {
                        1.0
                    } else {
                        s.reward
                    }
                })
                .collect();
            if config.reward_baseline {
                let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
                rewards.iter_mut().for_each(|r| *r -= mean);
            }
            let model = &checkpoint.model;
            let results: Vec<Result<(f64, Gradients)>> = pool.install(|| {
                picks
                    .par_iter()
                    .zip(rewards.par_iter())
                    .map(|((d, s), &r)| train_iteration(model, &d.tokens, &s.labels, r))
                    .collect()
            });
            let mut grads = Gradients::zeros_like(&checkpoint.model.params);
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l;
                grads.merge(&g);
            }
            let scale = 1.0 / batch.len() as f64;
            grads.scale(scale);
            adam.step(&mut checkpoint.model.params, &grads);
            checkpoint.step += 1;
            observer.on_step(&StepLog {
                step: checkpoint.step,
                loss: loss * scale,
                mean_reward: picks.iter().map(|(_, s)| s.reward).sum::<f64>() * scale,
                lr: config.learning_rate,
            })?;
            if config.checkpoint_interval > 0
                && checkpoint.step.is_multiple_of(config.checkpoint_interval)
            {
                validate_into(&mut checkpoint, validation)?;
                last_validated = Some(checkpoint.step);
                observer.on_checkpoint(&checkpoint)?;
            }
        }
        log::debug!("epoch {} done at step {}", epoch + 1, checkpoint.step);
    }
    if last_validated != Some(checkpoint.step) {
        validate_into(&mut checkpoint, validation)?;
        observer.on_checkpoint(&checkpoint)?;
    }
    Ok(TrainOutcome {
        checkpoint,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalrun::prepare;
    use crate::model::tests::{tiny_config, tiny_doc, tiny_model};
    use crate::oracle::OracleConfig;

    fn fixture() -> (GosumModel, TokenizedDocument) {
        let model = tiny_model(tiny_config());
        let doc = model.tokenize(&tiny_doc());
        (model, doc)
    }

    #[test]
    fn zero_reward_gives_zero_loss_and_gradient() {
        let (model, doc) = fixture();
        let (loss, grads) = train_iteration(&model, &doc, &[2, 0], 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn loss_is_linear_in_reward() {
        let (model, doc) = fixture();
        let (a, _) = train_iteration(&model, &doc, &[1], 0.3).unwrap();
        let (b, _) = train_iteration(&model, &doc, &[1], 0.6).unwrap();
        assert_eq!(2.0 * a, b);
        assert!(a > 0.0);
    }

    #[test]
    fn single_label_loss_matches_step_values() {
        use crate::policy::StepDecision;
        let (model, doc) = fixture();
        let mut tape = Tape::new(&model.params);
        let enc = model.encode(&mut tape, &doc).unwrap();
        let mut ctx = ExtractionContext::new(3);
        let first = model.step(&mut tape, &enc, &ctx).unwrap();
        let first = StepDecision::from_vars(&tape, first, &ctx);
        ctx.extract(1).unwrap();
        let second = model.step(&mut tape, &enc, &ctx).unwrap();
        let second = StepDecision::from_vars(&tape, second, &ctx);
        let expected =
            -0.7 * ((1.0 - first.p_stop).ln() + first.scores[1].ln() + second.p_stop.ln());
        let (loss, _) = train_iteration(&model, &doc, &[1], 0.7).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn no_terminal_stop_when_everything_is_extracted() {
        let (model, doc) = fixture();
        let (full, _) = train_iteration(&model, &doc, &[0, 1, 2], 1.0).unwrap();
        assert!(full.is_finite() && full > 0.0);
    }

    #[test]
    fn bad_labels_name_the_document() {
        let (model, doc) = fixture();
        for labels in [vec![3], vec![0, 0]] {
            let err = train_iteration(&model, &doc, &labels, 1.0).unwrap_err();
            assert!(err.to_string().contains("tiny"), "{err}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (model, doc) = fixture();
        let check = gradient_check(&model, &doc, &[2, 0], 0.8, 1e-5).unwrap();
        assert!(check.max_relative_error < 1e-4, "{check:?}");
        assert!(check.checked > 100);
    }

    fn tiny_training(epochs: usize) -> (Checkpoint, Vec<PreparedDoc>, LabelStore) {
        let config = TrainConfig {
            model: tiny_config(),
            epochs,
            batch_size: 2,
            checkpoint_interval: 0,
            learning_rate: 1e-2,
            seed: 3,
            ..TrainConfig::default()
        };
        let model = tiny_model(tiny_config());
        let table = EmbeddingTable {
            vocab: model.vocab.clone(),
            vectors: model
                .params
                .value(model.params.find("embedding").unwrap())
                .clone(),
        };
        let ckpt = Checkpoint::initial(config, table).unwrap();
        let mut other = tiny_doc();
        other.id = "other".into();
        let docs = prepare(&[tiny_doc(), other.clone()], &ckpt.model.vocab);
        let store = LabelStore::generate(&[tiny_doc(), other], &OracleConfig::pubmed(), 1).unwrap();
        (ckpt, docs, store)
    }

    #[test]
    fn zero_epochs_returns_initial_checkpoint() {
        let (ckpt, docs, store) = tiny_training(0);
        let before = ckpt.model.params.clone();
        let out = train(ckpt, &docs, &store, &docs, &mut ()).unwrap();
        assert_eq!(out.checkpoint.step, 0);
        assert_eq!(out.checkpoint.model.params, before);
        assert!(out.checkpoint.validation.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_counts_steps() {
        let run = || {
            let (ckpt, docs, store) = tiny_training(3);
            let mut logs = FileObserver {
                log: Vec::new(),
                checkpoint_dir: None,
            };
            let out = train(ckpt, &docs, &store, &docs, &mut logs).unwrap();
            (out, logs.log)
        };
        let (a, log_a) = run();
        let (b, log_b) = run();
        assert_eq!(a.checkpoint.step, 3);
        assert_eq!(a.checkpoint.model.params, b.checkpoint.model.params);
        assert_eq!(log_a, log_b);
        assert_eq!(String::from_utf8(log_a).unwrap().lines().count(), 3);
        assert_eq!(a.checkpoint.validation.len(), 1);
    }

    #[test]
    fn unlabeled_documents_are_skipped_or_fatal() {
        let (ckpt, docs, _) = tiny_training(1);
        assert!(train(ckpt.clone(), &docs, &LabelStore::new(), &[], &mut ()).is_err());
        let (_, _, store) = tiny_training(1);
        let mut extra = docs.clone();
        extra[1].doc.id = "unlabeled".into();
        let out = train(ckpt, &extra, &store, &[], &mut ()).unwrap();
        assert_eq!(out.skipped, 1);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (ckpt, docs, store) = tiny_training(2);
        let out = train(ckpt, &docs, &store, &docs, &mut ())
            .unwrap()
            .checkpoint;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        out.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step, out.step);
        assert_eq!(back.config, out.config);
        assert_eq!(back.validation, out.validation);
        let doc = &docs[0].tokens;
        let a = train_iteration(&out.model, doc, &[2], 0.5).unwrap().0;
        let b = train_iteration(&back.model, doc, &[2], 0.5).unwrap().0;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn invalid_configs() {
        for c in [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                top_k: Some(0),
                ..TrainConfig::default()
            },
            TrainConfig {
                threshold: 1.5,
                ..TrainConfig::default()
            },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
