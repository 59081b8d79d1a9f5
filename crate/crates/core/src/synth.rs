//! Deterministic synthetic corpus whose abstracts restate one designated
//! section. Sentence content carries no hint of which section is
//! designated; only the section titles and membership do.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Section, StructuredDocument};
use crate::error::{GosumError, Result};

pub const DESIGNATED_TITLE: &str = "principal findings";

const OTHER_TITLES: &[&str] = &[
    "background",
    "related work",
    "materials and methods",
    "data collection",
    "experimental setup",
    "statistical analysis",
    "discussion",
    "limitations",
    "future directions",
    "acknowledgements",
];

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub docs: usize,
    pub seed: u64,
    /// Number of distinct content words.
    pub vocab_size: usize,
    pub min_sections: usize,
    pub max_sections: usize,
    pub min_section_sentences: usize,
    pub max_section_sentences: usize,
    pub min_designated_sentences: usize,
    pub max_designated_sentences: usize,
    pub min_sentence_words: usize,
    pub max_sentence_words: usize,
    /// Word `k` (0-based) is drawn with weight `(k + 1)^-zipf_exponent`;
    /// 0 gives uniform word frequencies.
    pub zipf_exponent: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            docs: 200,
            seed: 7,
            vocab_size: 400,
            min_sections: 3,
            max_sections: 5,
            min_section_sentences: 3,
            max_section_sentences: 6,
            min_designated_sentences: 2,
            max_designated_sentences: 3,
            min_sentence_words: 8,
            max_sentence_words: 14,
            zipf_exponent: 1.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let ranges = [
            ("sections", self.min_sections, self.max_sections),
            (
                "section sentences",
                self.min_section_sentences,
                self.max_section_sentences,
            ),
            (
                "designated sentences",
                self.min_designated_sentences,
                self.max_designated_sentences,
            ),
            (
                "sentence words",
                self.min_sentence_words,
                self.max_sentence_words,
            ),
        ];
        for (name, lo, hi) in ranges {
            if lo == 0 || lo > hi {
                return Err(GosumError::InvalidArgument(format!(
                    "bad {name} range {lo}..={hi}"
                )));
            }
        }
        if self.max_sections > OTHER_TITLES.len() + 1 {
            return Err(GosumError::InvalidArgument(format!(
                "at most {} sections supported",
                OTHER_TITLES.len() + 1
            )));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(GosumError::InvalidArgument(format!(
                "zipf_exponent must be a finite non-negative number, got {}",
                self.zipf_exponent
            )));
        }
        if self.vocab_size < 2 {
            return Err(GosumError::InvalidArgument(
                "vocab_size must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Pronounceable distinct pseudo-words, deterministic in `count`.
fn content_words(count: usize) -> Vec<String> {
    let mut words = Vec::with_capacity(count);
    let syllables: Vec<String> = ONSETS
        .iter()
        .flat_map(|o| VOWELS.iter().map(move |v| format!("{o}{v}")))
        .collect();
    let mut n = 0usize;
    while words.len() < count {
        // base-|syllables| digits, at least two syllables
        let mut k = n + syllables.len();
        let mut w = String::new();
        while k > 0 {
            w.push_str(&syllables[k % syllables.len()]);
            k /= syllables.len();
        }
        words.push(w);
        n += 1;
    }
    words
}

struct Lexicon {
    words: Vec<String>,
    frequency: WeightedIndex<f64>,
}

impl Lexicon {
    fn new(cfg: &SynthConfig) -> Self {
        let weights = (0..cfg.vocab_size).map(|k| ((k + 1) as f64).powf(-cfg.zipf_exponent));
        Self {
            words: content_words(cfg.vocab_size),
            frequency: WeightedIndex::new(weights).expect("positive weights"),
        }
    }

    fn word(&self, rng: &mut ChaCha8Rng) -> String {
        self.words[self.frequency.sample(rng)].clone()
    }
}

fn sentence(rng: &mut ChaCha8Rng, lexicon: &Lexicon, cfg: &SynthConfig) -> Vec<String> {
    let len = rng.gen_range(cfg.min_sentence_words..=cfg.max_sentence_words);
    (0..len).map(|_| lexicon.word(rng)).collect()
}

/// Drops one word and replaces another with a random word.
fn paraphrase(rng: &mut ChaCha8Rng, tokens: &[String], lexicon: &Lexicon) -> Vec<String> {
    let mut out = tokens.to_vec();
    if out.len() > 2 {
        out.remove(rng.gen_range(0..out.len()));
    }
    let at = rng.gen_range(0..out.len());
    out[at] = lexicon.word(rng);
    out
}

fn render(tokens: &[String]) -> String {
    let mut s = tokens.join(" ");
    s.push_str(" .");
    s
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<StructuredDocument>> {
    cfg.validate()?;
    let lexicon = Lexicon::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut docs = Vec::with_capacity(cfg.docs);
    for d in 0..cfg.docs {
        let sections = rng.gen_range(cfg.min_sections..=cfg.max_sections);
        let designated = rng.gen_range(0..sections);
        let mut titles: Vec<&str> = OTHER_TITLES
            .choose_multiple(&mut rng, sections - 1)
            .copied()
            .collect();
        titles.insert(designated, DESIGNATED_TITLE);
        let mut out_sections = Vec::with_capacity(sections);
        let mut abstract_sentences = Vec::new();
        for (k, title) in titles.into_iter().enumerate() {
            let count = if k == designated {
                rng.gen_range(cfg.min_designated_sentences..=cfg.max_designated_sentences)
            } else {
                rng.gen_range(cfg.min_section_sentences..=cfg.max_section_sentences)
            };
            let mut sentences = Vec::with_capacity(count);
            for _ in 0..count {
                let s = sentence(&mut rng, &lexicon, cfg);
                if k == designated {
                    abstract_sentences.push(render(&paraphrase(&mut rng, &s, &lexicon)));
                }
                sentences.push(render(&s));
            }
            out_sections.push(Section {
                title: title.to_owned(),
                sentences,
            });
        }
        docs.push(StructuredDocument {
            id: format!("synth-{d:05}"),
            abstract_sentences,
            sections: out_sections,
        });
    }
    Ok(docs)
}
