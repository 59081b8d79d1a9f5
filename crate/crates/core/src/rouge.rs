//! ROUGE-1, ROUGE-2 and ROUGE-L F-measures over token sequences and the
//! scalar extraction reward built from them.
//!
//! No stemming or stopword removal is applied. ROUGE-L uses the longest
//! common subsequence of the flat, concatenated token sequences.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

/// Precision, recall and F1 of one comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        if candidate_total == 0 || reference_total == 0 {
            return Self::default();
        }
        let precision = overlap as f64 / candidate_total as f64;
        let recall = overlap as f64 / reference_total as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// The three F-scores that make up the reward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub r1_f: f64,
    pub r2_f: f64,
    pub rl_f: f64,
}

impl RougeScores {
    /// Average of the three F-scores.
    pub fn mean(&self) -> f64 {
        (self.r1_f + self.r2_f + self.rl_f) / 3.0
    }

    /// Component-wise mean over a set of scores; zeros when empty.
    pub fn average<'a>(scores: impl IntoIterator<Item = &'a RougeScores>) -> RougeScores {
        let mut total = RougeScores::default();
        let mut count = 0usize;
        for s in scores {
            total.r1_f += s.r1_f;
            total.r2_f += s.r2_f;
            total.rl_f += s.rl_f;
            count += 1;
        }
        if count > 0 {
            let c = count as f64;
            total.r1_f /= c;
            total.r2_f /= c;
            total.rl_f /= c;
        }
        total
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap scores. Panics if `n == 0`.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Prf {
    assert!(n >= 1, "ROUGE-N needs n >= 1");
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap = cand
        .iter()
        .map(|(gram, &c)| refs.get(gram).map_or(0, |&r| c.min(r)))
        .sum();
    let cand_total = candidate.len().saturating_sub(n - 1);
    let ref_total = reference.len().saturating_sub(n - 1);
    Prf::from_counts(overlap, cand_total, ref_total)
}

/// Length of the longest common subsequence, two-row dynamic program.
pub fn lcs_length<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Prf {
    Prf::from_counts(
        lcs_length(candidate, reference),
        candidate.len(),
        reference.len(),
    )
}

pub fn rouge_scores<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> RougeScores {
    RougeScores {
        r1_f: rouge_n(candidate, reference, 1).f1,
        r2_f: rouge_n(candidate, reference, 2).f1,
        rl_f: rouge_l(candidate, reference).f1,
    }
}

/// Scores of the concatenated candidate sentences against the concatenated
/// abstract sentences.
pub fn summary_scores<T: Eq + Hash + Clone>(
    candidate_sentences: &[impl AsRef<[T]>],
    abstract_sentences: &[impl AsRef<[T]>],
) -> RougeScores {
    let cand: Vec<T> = candidate_sentences
        .iter()
        .flat_map(|s| s.as_ref().iter().cloned())
        .collect();
    let reference: Vec<T> = abstract_sentences
        .iter()
        .flat_map(|s| s.as_ref().iter().cloned())
        .collect();
    rouge_scores(&cand, &reference)
}

/// Mean of ROUGE-1, ROUGE-2 and ROUGE-L F1; lies in `[0, 1]`.
pub fn reward<T: Eq + Hash + Clone>(
    candidate_sentences: &[impl AsRef<[T]>],
    abstract_sentences: &[impl AsRef<[T]>],
) -> f64 {
    summary_scores(candidate_sentences, abstract_sentences).mean()
}
