//! Oracle label sequences: beam search over ordered sentence subsets scored
//! by the ROUGE reward, an exhaustive reference search for small inputs, and
//! the line-delimited label store.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, StructuredDocument};
use crate::error::{GosumError, Result};
use crate::rouge::{self, RougeScores};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub beam_width: usize,
    pub max_len: usize,
    pub max_labels: usize,
}

impl OracleConfig {
    pub fn pubmed() -> Self {
        Self {
            beam_width: 16,
            max_len: 7,
            max_labels: 15,
        }
    }

    pub fn arxiv() -> Self {
        Self {
            max_len: 8,
            ..Self::pubmed()
        }
    }
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self::pubmed()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub doc_id: String,
    pub labels: Vec<usize>,
    pub reward: f64,
}

/// Reward evaluation for one document: sentences and abstract interned to
/// integer tokens.
#[derive(Debug, Clone)]
pub struct OracleProblem {
    sentences: Vec<Vec<u32>>,
    reference: Vec<u32>,
}

impl OracleProblem {
    pub fn new<S: AsRef<str>>(sentences: &[Vec<S>], abstract_sentences: &[Vec<S>]) -> Self {
        let mut interner: HashMap<String, u32> = HashMap::new();
        let mut intern = |tokens: &[S]| -> Vec<u32> {
            tokens
                .iter()
                .map(|t| {
                    let next = interner.len() as u32;
                    *interner.entry(t.as_ref().to_owned()).or_insert(next)
                })
                .collect()
        };
        let sentences = sentences.iter().map(|s| intern(s)).collect();
        let reference = abstract_sentences.iter().flat_map(|s| intern(s)).collect();
        Self {
            sentences,
            reference,
        }
    }

    pub fn from_document(doc: &StructuredDocument) -> Self {
        let sentences: Vec<Vec<String>> = doc.sentences().map(tokenize).collect();
        let abstract_tokens: Vec<Vec<String>> =
            doc.abstract_sentences.iter().map(|s| tokenize(s)).collect();
        Self::new(&sentences, &abstract_tokens)
    }

    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    /// ROUGE F-scores of the labelled sentences, concatenated in order.
    pub fn scores(&self, labels: &[usize]) -> RougeScores {
        let candidate: Vec<u32> = labels
            .iter()
            .flat_map(|&i| self.sentences[i].iter().copied())
            .collect();
        rouge::rouge_scores(&candidate, &self.reference)
    }

    pub fn reward(&self, labels: &[usize]) -> f64 {
        self.scores(labels).mean()
    }

    /// Beam search over ordered sentence sequences.
    ///
    /// Every step extends each kept sequence by every unused sentence and
    /// keeps the `beam_width` best extensions. A sequence is emitted once no
    /// single extension raises its reward, or when it reaches `max_len`.
    /// Results are the best `max_labels` emitted sequences that are distinct
    /// as index sets, ordered by reward and then lexicographically.
    pub fn beam_search(&self, config: &OracleConfig) -> Result<Vec<(Vec<usize>, f64)>> {
        if config.beam_width < config.max_labels || config.max_labels == 0 || config.max_len == 0 {
            return Err(GosumError::InvalidArgument(format!(
                "oracle needs beam_width >= max_labels >= 1 and max_len >= 1, got {config:?}"
            )));
        }
        let n = self.sentences.len();
        if n == 0 {
            return Err(GosumError::Empty("document without sentences".into()));
        }
        let max_len = config.max_len.min(n);
        let mut beam: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        let mut emitted: Vec<(Vec<usize>, f64)> = Vec::new();
        for _ in 0..max_len {
            let mut candidates = Vec::new();
            for (seq, score) in &beam {
                let mut improved = false;
                for j in (0..n).filter(|j| !seq.contains(j)) {
                    let mut next = seq.clone();
                    next.push(j);
                    let r = self.reward(&next);
                    improved |= r > *score;
                    candidates.push((next, r));
                }
                if !improved && !seq.is_empty() {
                    emitted.push((seq.clone(), *score));
                }
            }
            candidates.sort_by(rank);
            candidates.truncate(config.beam_width);
            beam = candidates;
        }
        emitted.extend(beam);
        emitted.sort_by(rank);

        let mut seen_sets: Vec<Vec<usize>> = Vec::new();
        let mut out = Vec::new();
        for (seq, r) in emitted {
            let mut set = seq.clone();
            set.sort_unstable();
            if seen_sets.contains(&set) {
                continue;
            }
            seen_sets.push(set);
            out.push((seq, r));
            if out.len() == config.max_labels {
                break;
            }
        }
        Ok(out)
    }

    /// Exact best ordered subset of at most `max_len` sentences; ties go to
    /// the lexicographically smallest sequence. Limited to `n <= 12` and
    /// `max_len <= 4`.
    pub fn exhaustive(&self, max_len: usize) -> Result<(Vec<usize>, f64)> {
        let n = self.sentences.len();
        if n == 0 || n > 12 || max_len == 0 || max_len > 4 {
            return Err(GosumError::InvalidArgument(format!(
                "exhaustive oracle limited to 1 <= n <= 12 and 1 <= max_len <= 4 (n = {n}, max_len = {max_len})"
            )));
        }
        let mut best: (Vec<usize>, f64) = (vec![0], self.reward(&[0]));
        let mut seq = Vec::with_capacity(max_len);
        self.search(&mut seq, max_len, &mut best);
        Ok(best)
    }

    // Depth-first visit in lexicographic order, keeping strict improvements.
    fn search(&self, seq: &mut Vec<usize>, max_len: usize, best: &mut (Vec<usize>, f64)) {
        if !seq.is_empty() {
            let r = self.reward(seq);
            if r > best.1 {
                *best = (seq.clone(), r);
            }
        }
        if seq.len() == max_len {
            return;
        }
        for j in 0..self.sentences.len() {
            if !seq.contains(&j) {
                seq.push(j);
                self.search(seq, max_len, best);
                seq.pop();
            }
        }
    }
}

fn rank(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Beam-search labels for one document.
pub fn beam_search_labels(
    doc: &StructuredDocument,
    config: &OracleConfig,
) -> Result<Vec<LabeledSample>> {
    let problem = OracleProblem::from_document(doc);
    let found = problem
        .beam_search(config)
        .map_err(|e| GosumError::Document {
            doc_id: doc.id.clone(),
            message: e.to_string(),
        })?;
    Ok(found
        .into_iter()
        .map(|(labels, reward)| LabeledSample {
            doc_id: doc.id.clone(),
            labels,
            reward,
        })
        .collect())
}

pub fn exhaustive_oracle(doc: &StructuredDocument, max_len: usize) -> Result<(Vec<usize>, f64)> {
    OracleProblem::from_document(doc).exhaustive(max_len)
}

/// Labels for every document, grouped by document id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelStore {
    samples: BTreeMap<String, Vec<LabeledSample>>,
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    format: String,
    version: u32,
}

const STORE_FORMAT: &str = "gosum-labels";

impl LabelStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a sample keeping the document's list in reward order.
    pub fn insert(&mut self, sample: LabeledSample) {
        let list = self.samples.entry(sample.doc_id.clone()).or_default();
        list.push(sample);
        list.sort_by(|a, b| {
            b.reward
                .total_cmp(&a.reward)
                .then_with(|| a.labels.cmp(&b.labels))
        });
    }

    pub fn get(&self, doc_id: &str) -> &[LabeledSample] {
        self.samples.get(doc_id).map_or(&[], Vec::as_slice)
    }

    pub fn num_docs(&self) -> usize {
        self.samples.len()
    }

    pub fn num_samples(&self) -> usize {
        self.samples.values().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[LabeledSample])> {
        self.samples.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Runs the beam search over `documents` on `workers` threads.
    pub fn generate(
        documents: &[StructuredDocument],
        config: &OracleConfig,
        workers: usize,
    ) -> Result<Self> {
        let pool = crate::worker_pool(workers)?;
        let per_doc: Vec<Result<Vec<LabeledSample>>> = pool.install(|| {
            documents
                .par_iter()
                .map(|d| beam_search_labels(d, config))
                .collect()
        });
        let mut store = Self::new();
        for samples in per_doc {
            for s in samples? {
                store.insert(s);
            }
        }
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(
            &mut w,
            &StoreHeader {
                format: STORE_FORMAT.into(),
                version: 1,
            },
        )?;
        w.write_all(b"\n")?;
        for samples in self.samples.values() {
            for s in samples {
                serde_json::to_writer(&mut w, s)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut store = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| GosumError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let value: serde_json::Value =
                serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            if value.get("format").is_some() {
                let header: StoreHeader =
                    serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
                if header.format != STORE_FORMAT {
                    return Err(parse_err(format!("unexpected format {:?}", header.format)));
                }
                continue;
            }
            let sample: LabeledSample =
                serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
            if sample.labels.is_empty() {
                return Err(parse_err("sample without labels".into()));
            }
            store.insert(sample);
        }
        Ok(store)
    }

    /// Reads a store and validates it against `documents`: samples of
    /// unknown documents are dropped with a warning, label indices must be in
    /// range and distinct, and every stored reward must match a fresh
    /// computation within 1e-9.
    pub fn read_for_corpus(path: &Path, documents: &[StructuredDocument]) -> Result<(Self, usize)> {
        let raw = Self::read(path)?;
        let by_id: HashMap<&str, &StructuredDocument> =
            documents.iter().map(|d| (d.id.as_str(), d)).collect();
        let mut store = Self::new();
        let mut dropped = 0;
        for (doc_id, samples) in raw.samples {
            let Some(doc) = by_id.get(doc_id.as_str()) else {
                log::warn!(
                    "label store: unknown document {doc_id}, {} samples dropped",
                    samples.len()
                );
                dropped += samples.len();
                continue;
            };
            let problem = OracleProblem::from_document(doc);
            for s in samples {
                validate_sample(&s, &problem)?;
                store.insert(s);
            }
        }
        Ok((store, dropped))
    }
}

fn validate_sample(sample: &LabeledSample, problem: &OracleProblem) -> Result<()> {
    let doc_err = |message: String| GosumError::Document {
        doc_id: sample.doc_id.clone(),
        message,
    };
    let n = problem.num_sentences();
    if let Some(&bad) = sample.labels.iter().find(|&&i| i >= n) {
        return Err(doc_err(format!(
            "label {bad} out of range for {n} sentences"
        )));
    }
    let mut sorted = sample.labels.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != sample.labels.len() {
        return Err(doc_err(format!("repeated label in {:?}", sample.labels)));
    }
    let recomputed = problem.reward(&sample.labels);
    if (recomputed - sample.reward).abs() > 1e-9 {
        return Err(doc_err(format!(
            "stored reward {} differs from recomputed {recomputed}",
            sample.reward
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Section;

    fn doc(sentences: &[&str], abstract_sentences: &[&str]) -> StructuredDocument {
        StructuredDocument {
            id: "doc".into(),
            abstract_sentences: abstract_sentences.iter().map(|s| s.to_string()).collect(),
            sections: vec![Section {
                title: "body".into(),
                sentences: sentences.iter().map(|s| s.to_string()).collect(),
            }],
        }
    }

    #[test]
    fn exact_match_dominates() {
        let d = doc(
            &[
                "alpha beta",
                "gamma delta",
                "the key finding here",
                "epsilon",
                "zeta eta",
            ],
            &["the key finding here"],
        );
        let samples = beam_search_labels(&d, &OracleConfig::pubmed()).unwrap();
        assert_eq!(samples[0].labels, vec![2]);
        assert_eq!(samples[0].reward, 1.0);
    }

    #[test]
    fn samples_are_sorted_distinct_and_consistent() {
        let d = doc(
            &["a b c", "c d e", "e f g", "a c e", "b d f", "x y z"],
            &["a b c d", "e f g"],
        );
        let problem = OracleProblem::from_document(&d);
        let samples = beam_search_labels(&d, &OracleConfig::pubmed()).unwrap();
        assert!(!samples.is_empty() && samples.len() <= 15);
        let mut sets = Vec::new();
        for w in samples.windows(2) {
            assert!(w[0].reward >= w[1].reward);
        }
        for s in &samples {
            assert!(s.labels.len() <= 7 && !s.labels.is_empty());
            assert_eq!(problem.reward(&s.labels), s.reward);
            let mut set = s.labels.clone();
            set.sort_unstable();
            assert!(!sets.contains(&set));
            sets.push(set);
        }
    }

    #[test]
    fn exhaustive_edge_cases() {
        let one = doc(&["only sentence"], &["nothing shared"]);
        assert_eq!(exhaustive_oracle(&one, 3).unwrap(), (vec![0], 0.0));

        let none = doc(&["a b", "c d", "e f"], &["x y z"]);
        assert_eq!(exhaustive_oracle(&none, 2).unwrap(), (vec![0], 0.0));

        let pair = doc(
            &["red fox", "noise words", "jumps high"],
            &["red fox jumps high"],
        );
        let (labels, best) = exhaustive_oracle(&pair, 3).unwrap();
        assert_eq!(labels, vec![0, 2]);
        let problem = OracleProblem::from_document(&pair);
        for i in 0..3 {
            assert!(best > problem.reward(&[i]));
        }

        let big: Vec<String> = (0..13).map(|i| format!("s{i}")).collect();
        let big: Vec<&str> = big.iter().map(String::as_str).collect();
        assert!(exhaustive_oracle(&doc(&big, &["s1"]), 2).is_err());
        assert!(exhaustive_oracle(&pair, 5).is_err());
    }

    #[test]
    fn wide_beam_equals_exhaustive() {
        let d = doc(
            &["a b c", "b c d", "d e", "a e f", "f g"],
            &["a b c d e", "f g a"],
        );
        let problem = OracleProblem::from_document(&d);
        let config = OracleConfig {
            beam_width: 5 * 4 * 3,
            max_len: 3,
            max_labels: 15,
        };
        let (best, reward) = problem.exhaustive(3).unwrap();
        let top = &problem.beam_search(&config).unwrap()[0];
        assert_eq!(top.1, reward);
        assert_eq!(top.0, best);
    }

    #[test]
    fn invalid_configuration() {
        let d = doc(&["a"], &["a"]);
        let bad = OracleConfig {
            beam_width: 4,
            max_len: 3,
            max_labels: 5,
        };
        assert!(beam_search_labels(&d, &bad).is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(OracleConfig::pubmed().max_len, 7);
        assert_eq!(OracleConfig::arxiv().max_len, 8);
        assert_eq!(OracleConfig::pubmed().max_labels, 15);
        assert_eq!(OracleConfig::pubmed().beam_width, 16);
    }

    #[test]
    fn store_round_trip_and_validation() {
        let docs: Vec<StructuredDocument> = (0..3)
            .map(|k| {
                let mut d = doc(
                    &[
                        "a b c", "c d e", "e f g", "a c e", "b d f", "x y z", "g h", "h i j",
                    ],
                    &["a b c d", "e f g h"],
                );
                d.id = format!("doc{k}");
                d
            })
            .collect();
        let store = LabelStore::generate(&docs, &OracleConfig::pubmed(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        store.write(&path).unwrap();
        assert_eq!(LabelStore::read(&path).unwrap(), store);
        let lines = std::fs::read_to_string(&path).unwrap().lines().count();
        assert_eq!(lines, store.num_samples() + 1);

        let (checked, dropped) = LabelStore::read_for_corpus(&path, &docs[..2]).unwrap();
        assert_eq!(dropped, store.get("doc2").len());
        assert_eq!(checked.num_docs(), 2);

        let mut tampered = LabelStore::new();
        let mut s = store.get("doc0")[0].clone();
        s.reward += 1e-6;
        tampered.insert(s);
        tampered.write(&path).unwrap();
        assert!(LabelStore::read_for_corpus(&path, &docs).is_err());

        let mut out_of_range = LabelStore::new();
        out_of_range.insert(LabeledSample {
            doc_id: "doc0".into(),
            labels: vec![99],
            reward: 0.0,
        });
        out_of_range.write(&path).unwrap();
        assert!(LabelStore::read_for_corpus(&path, &docs).is_err());
    }

    #[test]
    fn generation_is_worker_count_independent() {
        let docs: Vec<StructuredDocument> = (0..6)
            .map(|k| {
                let mut d = doc(&["a b", "b c", "c d", "d e"], &["a b c", "d e"]);
                d.id = format!("d{k}");
                d
            })
            .collect();
        let one = LabelStore::generate(&docs, &OracleConfig::pubmed(), 1).unwrap();
        let four = LabelStore::generate(&docs, &OracleConfig::pubmed(), 4).unwrap();
        assert_eq!(one, four);
    }
}
