//! Thresholded extraction, corpus evaluation, simple baselines and the
//! ablation harness.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    mask_section_titles, scramble_sections, EmbeddingTable, StructuredDocument, TokenizedDocument,
    Vocabulary,
};
use crate::error::{GosumError, Result};
use crate::history::ExtractionContext;
use crate::model::GosumModel;
use crate::oracle::{LabelStore, OracleProblem};
use crate::policy::StepDecision;
use crate::rouge::RougeScores;
use crate::tensor::Tape;
use crate::trainer::{train, Checkpoint, TrainConfig};

/// A document with its model input and its reward evaluator.
#[derive(Debug, Clone)]
pub struct PreparedDoc {
    pub doc: StructuredDocument,
    pub tokens: TokenizedDocument,
    pub problem: OracleProblem,
}

impl PreparedDoc {
    pub fn new(doc: StructuredDocument, vocab: &Vocabulary) -> Self {
        let tokens = TokenizedDocument::new(&doc, vocab);
        let problem = OracleProblem::from_document(&doc);
        Self {
            doc,
            tokens,
            problem,
        }
    }

    pub fn id(&self) -> &str {
        &self.doc.id
    }

    pub fn has_abstract(&self) -> bool {
        !self.doc.abstract_sentences.is_empty()
    }
}

pub fn prepare(docs: &[StructuredDocument], vocab: &Vocabulary) -> Vec<PreparedDoc> {
    docs.iter()
        .map(|d| PreparedDoc::new(d.clone(), vocab))
        .collect()
}

/// One line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub doc_id: String,
    pub indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rl: Option<f64>,
}

impl ExtractionResult {
    fn new(doc: &PreparedDoc, indices: Vec<usize>) -> Self {
        let scores = doc.has_abstract().then(|| doc.problem.scores(&indices));
        Self {
            doc_id: doc.id().to_owned(),
            indices,
            r1: scores.map(|s| s.r1_f),
            r2: scores.map(|s| s.r2_f),
            rl: scores.map(|s| s.rl_f),
        }
    }

    pub fn scores(&self) -> Option<RougeScores> {
        Some(RougeScores {
            r1_f: self.r1?,
            r2_f: self.r2?,
            rl_f: self.rl?,
        })
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if (0.0..=1.0).contains(&threshold) {
        Ok(())
    } else {
        Err(GosumError::InvalidArgument(format!(
            "stop threshold {threshold} outside [0, 1]"
        )))
    }
}

/// Greedy extraction: stop once `p_stop` exceeds `threshold`, after
/// `max_len` sentences, or when nothing remains; otherwise take the
/// highest-scoring remaining sentence.
pub fn extract(
    model: &GosumModel,
    doc: &TokenizedDocument,
    threshold: f64,
    max_len: usize,
) -> Result<Vec<usize>> {
    check_threshold(threshold)?;
    let mut tape = Tape::new(&model.params);
    let enc = model.encode(&mut tape, doc)?;
    let mut ctx = ExtractionContext::new(doc.num_sentences());
    while ctx.extracted().len() < max_len && !ctx.remaining().is_empty() {
        let vars = model.step(&mut tape, &enc, &ctx)?;
        let decision = StepDecision::from_vars(&tape, vars, &ctx);
        if decision.p_stop > threshold {
            break;
        }
        ctx.extract(decision.best())?;
    }
    Ok(ctx.extracted().to_vec())
}

/// Extracts from every document; scores are attached where an abstract exists.
pub fn extract_all(
    model: &GosumModel,
    docs: &[PreparedDoc],
    threshold: f64,
    max_len: usize,
    workers: usize,
) -> Result<Vec<ExtractionResult>> {
    check_threshold(threshold)?;
    let pool = crate::worker_pool(workers)?;
    pool.install(|| {
        docs.par_iter()
            .map(|d| {
                Ok(ExtractionResult::new(
                    d,
                    extract(model, &d.tokens, threshold, max_len)?,
                ))
            })
            .collect()
    })
}

/// Per-document results and their corpus means.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean: RougeScores,
    pub results: Vec<ExtractionResult>,
}

impl Evaluation {
    /// Scores given extractions; every document needs an abstract.
    pub fn from_indices(docs: &[PreparedDoc], indices: Vec<Vec<usize>>) -> Result<Self> {
        if docs.is_empty() {
            return Err(GosumError::Empty("evaluation corpus is empty".into()));
        }
        if let Some(d) = docs.iter().find(|d| !d.has_abstract()) {
            return Err(GosumError::Document {
                doc_id: d.id().to_owned(),
                message: "no abstract to evaluate against".into(),
            });
        }
        let results: Vec<ExtractionResult> = docs
            .iter()
            .zip(indices)
            .map(|(d, idx)| ExtractionResult::new(d, idx))
            .collect();
        let scores: Vec<RougeScores> = results
            .iter()
            .filter_map(ExtractionResult::scores)
            .collect();
        Ok(Self {
            mean: RougeScores::average(&scores),
            results,
        })
    }

    pub fn mean_reward(&self) -> f64 {
        self.mean.mean()
    }

    pub fn mean_length(&self) -> f64 {
        if self.results.is_empty() {
            return 0.0;
        }
        self.results.iter().map(|r| r.indices.len()).sum::<usize>() as f64
            / self.results.len() as f64
    }
}

pub fn evaluate(
    model: &GosumModel,
    docs: &[PreparedDoc],
    threshold: f64,
    max_len: usize,
    workers: usize,
) -> Result<Evaluation> {
    if docs.is_empty() {
        return Err(GosumError::Empty("evaluation corpus is empty".into()));
    }
    let results = extract_all(model, docs, threshold, max_len, workers)?;
    Evaluation::from_indices(docs, results.into_iter().map(|r| r.indices).collect())
}

/// First `k` sentences of each document.
pub fn lead_baseline(docs: &[PreparedDoc], k: usize) -> Result<Evaluation> {
    let picks = docs
        .iter()
        .map(|d| (0..k.min(d.tokens.num_sentences())).collect())
        .collect();
    Evaluation::from_indices(docs, picks)
}

/// Uniformly random sentences, `lengths[i]` of them for document `i`.
pub fn random_baseline(docs: &[PreparedDoc], lengths: &[usize], seed: u64) -> Result<Evaluation> {
    if lengths.len() != docs.len() {
        return Err(GosumError::InvalidArgument(format!(
            "{} lengths for {} documents",
            lengths.len(),
            docs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = docs
        .iter()
        .zip(lengths)
        .map(|(d, &len)| {
            let n = d.tokens.num_sentences();
            sample(&mut rng, n, len.min(n)).into_vec()
        })
        .collect();
    Evaluation::from_indices(docs, picks)
}

/// Replays each document's best stored label sequence.
pub fn oracle_replay(docs: &[PreparedDoc], store: &LabelStore) -> Result<Evaluation> {
    let picks = docs
        .iter()
        .map(|d| {
            store
                .get(d.id())
                .first()
                .map(|s| s.labels.clone())
                .ok_or_else(|| {
                    GosumError::LabelStore(format!("no stored labels for document {}", d.id()))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Evaluation::from_indices(docs, picks)
}

pub fn write_results(path: &Path, results: &[ExtractionResult]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// A training/evaluation variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Condition {
    Base,
    /// Reassign this fraction of sentences to a random other section.
    Scramble(f64),
    MaskTitles,
    /// Train with every sample's reward set to 1.
    NoReward,
    /// Sample training labels only from the `k` best.
    TopK(usize),
    NoGraph,
    NoSec2Sec,
}

impl FromStr for Condition {
    type Err = GosumError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || GosumError::InvalidArgument(format!("unknown ablation condition {s:?}"));
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let cond = match (name, arg) {
            ("base", None) => Condition::Base,
            ("mask_titles", None) => Condition::MaskTitles,
            ("no_reward", None) => Condition::NoReward,
            ("no_graph", None) => Condition::NoGraph,
            ("no_sec2sec", None) => Condition::NoSec2Sec,
            ("scramble", Some(a)) => {
                let rate: f64 = a.parse().map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&rate) {
                    return Err(GosumError::InvalidArgument(format!(
                        "scramble rate {rate} outside [0, 1]"
                    )));
                }
                Condition::Scramble(rate)
            }
            ("top_k", Some(a)) => {
                let k: usize = a.parse().map_err(|_| bad())?;
                if k == 0 {
                    return Err(GosumError::InvalidArgument("top_k needs k >= 1".into()));
                }
                Condition::TopK(k)
            }
            _ => return Err(bad()),
        };
        Ok(cond)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Base => write!(f, "base"),
            Condition::Scramble(r) => write!(f, "scramble:{r}"),
            Condition::MaskTitles => write!(f, "mask_titles"),
            Condition::NoReward => write!(f, "no_reward"),
            Condition::TopK(k) => write!(f, "top_k:{k}"),
            Condition::NoGraph => write!(f, "no_graph"),
            Condition::NoSec2Sec => write!(f, "no_sec2sec"),
        }
    }
}

impl Condition {
    pub fn apply_to_config(&self, config: &mut TrainConfig) {
        match *self {
            Condition::NoReward => config.reward_ablation = true,
            Condition::TopK(k) => config.top_k = Some(k),
            Condition::NoGraph => config.model.use_graph = false,
            Condition::NoSec2Sec => config.model.use_sec2sec = false,
            Condition::Base | Condition::Scramble(_) | Condition::MaskTitles => {}
        }
    }

    /// Document-side transforms; `seed` drives scrambling.
    pub fn apply_to_docs(
        &self,
        docs: &[StructuredDocument],
        vocab: &Vocabulary,
        seed: u64,
    ) -> Result<Vec<PreparedDoc>> {
        match *self {
            Condition::MaskTitles => Ok(docs
                .iter()
                .map(|d| PreparedDoc::new(mask_section_titles(d), vocab))
                .collect()),
            Condition::Scramble(rate) => docs
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let mut p = PreparedDoc::new(d.clone(), vocab);
                    p.tokens = scramble_sections(&p.tokens, rate, doc_seed(seed, i))?;
                    Ok(p)
                })
                .collect(),
            _ => Ok(prepare(docs, vocab)),
        }
    }
}

fn doc_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub condition: String,
    pub seeds: Vec<u64>,
    pub samples: usize,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub mean_reward: f64,
    pub per_seed: Vec<SeedResult>,
}

/// Trains and evaluates under `condition` once per seed. Runs for different
/// conditions with the same seed share initialisation and data order.
pub fn ablate(
    train_docs: &[StructuredDocument],
    eval_docs: &[StructuredDocument],
    store: &LabelStore,
    embeddings: &EmbeddingTable,
    base: &TrainConfig,
    condition: Condition,
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(GosumError::InvalidArgument(
            "ablation needs at least one seed".into(),
        ));
    }
    if eval_docs.is_empty() {
        return Err(GosumError::Empty("evaluation corpus is empty".into()));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut config = base.clone();
        config.seed = seed;
        condition.apply_to_config(&mut config);
        let train_set = condition.apply_to_docs(train_docs, &embeddings.vocab, seed)?;
        let eval_set = condition.apply_to_docs(eval_docs, &embeddings.vocab, seed ^ 0x5EED)?;
        let initial = Checkpoint::initial(config.clone(), embeddings.clone())?;
        let outcome = train(initial, &train_set, store, &[], &mut ())?;
        let evaluation = evaluate(
            &outcome.checkpoint.model,
            &eval_set,
            config.threshold,
            config.max_len,
            config.workers,
        )?;
        log::info!(
            "ablation {condition} seed {seed}: mean reward {:.4}",
            evaluation.mean_reward()
        );
        per_seed.push(SeedResult {
            seed,
            r1: evaluation.mean.r1_f,
            r2: evaluation.mean.r2_f,
            rl: evaluation.mean.rl_f,
            mean_reward: evaluation.mean_reward(),
        });
    }
    let k = per_seed.len() as f64;
    let avg = |f: fn(&SeedResult) -> f64| per_seed.iter().map(f).sum::<f64>() / k;
    Ok(AblationReport {
        condition: condition.to_string(),
        seeds: seeds.to_vec(),
        samples: eval_docs.len(),
        r1: avg(|s| s.r1),
        r2: avg(|s| s.r2),
        rl: avg(|s| s.rl),
        mean_reward: avg(|s| s.mean_reward),
        per_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_config, tiny_doc, tiny_model};
    use crate::oracle::{LabeledSample, OracleConfig};

    fn prepared() -> (GosumModel, Vec<PreparedDoc>) {
        let model = tiny_model(tiny_config());
        let docs = prepare(&[tiny_doc()], &model.vocab);
        (model, docs)
    }

    #[test]
    fn threshold_extremes() {
        let (model, docs) = prepared();
        let toks = &docs[0].tokens;
        assert!(extract(&model, toks, 0.0, 7).unwrap().is_empty());
        assert_eq!(extract(&model, toks, 1.0, 7).unwrap().len(), 3);
        assert_eq!(extract(&model, toks, 1.0, 2).unwrap().len(), 2);
        assert!(extract(&model, toks, 1.5, 2).is_err());
        let all = extract(&model, toks, 1.0, 7).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn evaluation_is_reproducible_and_worker_independent() {
        let (model, docs) = prepared();
        let a = evaluate(&model, &docs, 0.6, 7, 1).unwrap();
        let b = evaluate(&model, &docs, 0.6, 7, 3).unwrap();
        assert_eq!(a, b);
        assert!(evaluate(&model, &[], 0.6, 7, 1).is_err());
    }

    #[test]
    fn oracle_replay_reproduces_stored_scores() {
        let (_, docs) = prepared();
        let store = LabelStore::generate(&[tiny_doc()], &OracleConfig::pubmed(), 1).unwrap();
        let best: &LabeledSample = &store.get("tiny")[0];
        let eval = oracle_replay(&docs, &store).unwrap();
        let s = eval.results[0].scores().unwrap();
        assert!((s.mean() - best.reward).abs() < 1e-12);
        assert_eq!(eval.results[0].indices, best.labels);
        assert!(oracle_replay(&docs, &LabelStore::new()).is_err());
    }

    #[test]
    fn baselines() {
        let (_, docs) = prepared();
        assert_eq!(
            lead_baseline(&docs, 2).unwrap().results[0].indices,
            vec![0, 1]
        );
        let r = random_baseline(&docs, &[2], 4).unwrap();
        assert_eq!(r.results[0].indices.len(), 2);
        assert_eq!(r, random_baseline(&docs, &[2], 4).unwrap());
        assert!(random_baseline(&docs, &[], 4).is_err());
    }

    #[test]
    fn missing_abstract_is_an_error() {
        let (model, _) = prepared();
        let mut doc = tiny_doc();
        doc.abstract_sentences.clear();
        let docs = prepare(&[doc], &model.vocab);
        assert!(evaluate(&model, &docs, 0.6, 7, 1).is_err());
        let out = extract_all(&model, &docs, 1.0, 1, 1).unwrap();
        assert_eq!(out[0].scores(), None);
        let line = serde_json::to_string(&out[0]).unwrap();
        assert!(!line.contains("r1"));
    }

    #[test]
    fn condition_parsing_round_trips() {
        for s in [
            "base",
            "scramble:0.5",
            "mask_titles",
            "no_reward",
            "top_k:1",
            "no_graph",
            "no_sec2sec",
        ] {
            let c: Condition = s.parse().unwrap();
            assert_eq!(c.to_string(), s);
        }
        for s in ["scramble", "scramble:2", "top_k:0", "nope", "base:1"] {
            assert!(s.parse::<Condition>().is_err(), "{s}");
        }
    }

    #[test]
    fn scramble_zero_and_mask_keep_topology() {
        let (model, _) = prepared();
        let base = Condition::Base
            .apply_to_docs(&[tiny_doc()], &model.vocab, 1)
            .unwrap();
        let zero = Condition::Scramble(0.0)
            .apply_to_docs(&[tiny_doc()], &model.vocab, 1)
            .unwrap();
        assert_eq!(base[0].tokens, zero[0].tokens);
        let masked = Condition::MaskTitles
            .apply_to_docs(&[tiny_doc()], &model.vocab, 1)
            .unwrap();
        assert_eq!(masked[0].tokens.section_of, base[0].tokens.section_of);
        assert_eq!(masked[0].tokens.sentences, base[0].tokens.sentences);
        assert_ne!(masked[0].tokens.titles, base[0].tokens.titles);
    }
}
