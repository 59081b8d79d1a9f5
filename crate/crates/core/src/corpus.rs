//! Section-structured documents, tokenization, vocabulary and word vectors,
//! plus the section scrambling and title masking transforms.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GosumError, Result};
use crate::tensor::Matrix;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Sentences longer than this are truncated before encoding.
pub const MAX_SENTENCE_TOKENS: usize = 100;
/// Section titles longer than this are truncated before encoding.
pub const MAX_TITLE_TOKENS: usize = 20;
/// Documents are cut to this many sentences at ingestion.
pub const MAX_DOC_SENTENCES: usize = 500;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub title: String,
    pub sentences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredDocument {
    pub id: String,
    #[serde(rename = "abstract", default)]
    pub abstract_sentences: Vec<String>,
    pub sections: Vec<Section>,
}

impl StructuredDocument {
    pub fn num_sentences(&self) -> usize {
        self.sections.iter().map(|s| s.sentences.len()).sum()
    }

    /// All sentences in global index order.
    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.sections
            .iter()
            .flat_map(|s| s.sentences.iter().map(String::as_str))
    }

    pub fn sentence(&self, index: usize) -> Option<&str> {
        self.sentences().nth(index)
    }

    /// Section index of every sentence, in global order.
    pub fn section_membership(&self) -> Vec<usize> {
        self.sections
            .iter()
            .enumerate()
            .flat_map(|(k, s)| std::iter::repeat_n(k, s.sentences.len()))
            .collect()
    }

    /// Drops empty sections, fills empty titles with the `section k`
    /// placeholder and caps the sentence count. Returns the number of
    /// sentences dropped by the cap.
    fn normalize(&mut self) -> usize {
        self.sections.retain(|s| !s.sentences.is_empty());
        for (k, s) in self.sections.iter_mut().enumerate() {
            if s.title.trim().is_empty() {
                s.title = format!("section {k}");
            }
        }
        let mut budget = MAX_DOC_SENTENCES;
        let mut dropped = 0;
        for s in &mut self.sections {
            let keep = s.sentences.len().min(budget);
            dropped += s.sentences.len() - keep;
            s.sentences.truncate(keep);
            budget -= keep;
        }
        self.sections.retain(|s| !s.sentences.is_empty());
        dropped
    }
}

/// Result of reading a corpus file.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub documents: Vec<StructuredDocument>,
    /// Records with no sections or no sentences.
    pub skipped: usize,
    /// Sentences removed by the per-document cap.
    pub truncated_sentences: usize,
}

impl Corpus {
    pub fn mean_sentences(&self) -> f64 {
        if self.documents.is_empty() {
            return 0.0;
        }
        let total: usize = self.documents.iter().map(|d| d.num_sentences()).sum();
        total as f64 / self.documents.len() as f64
    }
}

/// Reads a corpus of one JSON document per line.
pub fn load_corpus(path: &Path, limit: Option<usize>) -> Result<Corpus> {
    let reader = BufReader::new(File::open(path)?);
    let mut corpus = Corpus::default();
    for (i, line) in reader.lines().enumerate() {
        if limit.is_some_and(|l| corpus.documents.len() >= l) {
            break;
        }
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut doc: StructuredDocument =
            serde_json::from_str(&line).map_err(|e| GosumError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        corpus.truncated_sentences += doc.normalize();
        if doc.sections.is_empty() {
            corpus.skipped += 1;
            continue;
        }
        corpus.documents.push(doc);
    }
    Ok(corpus)
}

pub fn write_corpus(path: &Path, documents: &[StructuredDocument]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for doc in documents {
        serde_json::to_writer(&mut w, doc)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Lowercases, splits on whitespace and splits off punctuation. A hyphen
/// survives inside a token only when both neighbours are alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().flat_map(char::to_lowercase).collect();
        let mut current = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let joins_word = c == '-'
                && i > 0
                && chars[i - 1].is_alphanumeric()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if c.is_alphanumeric() || joins_word {
                current.push(c);
            } else {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Token to id mapping; ids 0 and 1 are padding and unknown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(vocab: Vocabulary) -> Self {
        vocab.tokens
    }
}

impl Vocabulary {
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut vocab = Self {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        for t in tokens {
            if !vocab.index.contains_key(&t) {
                vocab.index.insert(t.clone(), vocab.tokens.len() as u32);
                vocab.tokens.push(t);
            }
        }
        vocab
    }

    /// Most frequent tokens of the documents' sentences and titles, ties in
    /// lexical order, at most `cap` of them.
    pub fn from_documents(documents: &[StructuredDocument], cap: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in documents {
            let texts = doc.sections.iter().flat_map(|s| {
                std::iter::once(s.title.as_str()).chain(s.sentences.iter().map(String::as_str))
            });
            for text in texts {
                for t in tokenize(text) {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(ranked.into_iter().take(cap).map(|(t, _)| t))
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids for `text`, truncated to `cap` tokens. Empty text maps to a single
    /// unknown token so every sequence has at least one position.
    pub fn encode(&self, text: &str, cap: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = tokenize(text)
            .iter()
            .take(cap)
            .map(|t| self.id(t))
            .collect();
        if ids.is_empty() {
            ids.push(UNK_ID);
        }
        ids
    }
}

/// Vocabulary plus a `|V| x d_w` vector table. Row 0 is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vocab: Vocabulary,
    pub vectors: Matrix,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Random vectors for an existing vocabulary, for corpora without
    /// pretrained embeddings. The unknown row is the mean of the others.
    pub fn random(vocab: Vocabulary, dim: usize, rng: &mut impl Rng) -> Self {
        let rows = vocab.len();
        let scale = (3.0 / dim as f64).sqrt();
        let mut vectors = Matrix::from_shape_fn((rows, dim), |_| rng.gen_range(-scale..scale));
        vectors.row_mut(PAD_ID as usize).fill(0.0);
        fill_unknown_with_mean(&mut vectors);
        Self { vocab, vectors }
    }
}

fn fill_unknown_with_mean(vectors: &mut Matrix) {
    let loaded = vectors.nrows().saturating_sub(2);
    let mean = if loaded == 0 {
        ndarray::Array1::zeros(vectors.ncols())
    } else {
        vectors
            .slice(ndarray::s![2.., ..])
            .sum_axis(ndarray::Axis(0))
            / loaded as f64
    };
    vectors.row_mut(UNK_ID as usize).assign(&mean);
}

/// Reads a whitespace-separated `token v1 .. vd` vector file, keeping the
/// first `vocab_cap` distinct tokens.
pub fn load_embedding_table(path: &Path, vocab_cap: usize) -> Result<EmbeddingTable> {
    let reader = BufReader::new(File::open(path)?);
    let mut tokens = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut data: Vec<f64> = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        if tokens.len() >= vocab_cap {
            break;
        }
        let line = line?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let parse_err = |message: String| GosumError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| parse_err(format!("bad float {f:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None if values.is_empty() => return Err(parse_err("no vector values".into())),
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(parse_err(format!(
                    "vector width {} differs from {d} on earlier lines",
                    values.len()
                )))
            }
            _ => {}
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("non-finite vector value".into()));
        }
        if token == PAD_TOKEN || token == UNK_TOKEN || !seen.insert(token.to_string()) {
            continue;
        }
        tokens.push(token.to_string());
        data.extend(values);
    }
    let dim = dim.ok_or_else(|| GosumError::Empty(format!("embedding file {}", path.display())))?;
    let vocab = Vocabulary::from_tokens(tokens);
    let mut vectors = Matrix::zeros((vocab.len(), dim));
    for (r, chunk) in data.chunks(dim).enumerate() {
        vectors
            .row_mut(r + 2)
            .assign(&ndarray::ArrayView1::from(chunk));
    }
    fill_unknown_with_mean(&mut vectors);
    Ok(EmbeddingTable { vocab, vectors })
}

/// Token ids of every sentence and section title, plus which section each
/// sentence belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedDocument {
    pub doc_id: String,
    pub sentences: Vec<Vec<u32>>,
    pub titles: Vec<Vec<u32>>,
    pub section_of: Vec<usize>,
}

impl TokenizedDocument {
    pub fn new(doc: &StructuredDocument, vocab: &Vocabulary) -> Self {
        Self {
            doc_id: doc.id.clone(),
            sentences: doc
                .sentences()
                .map(|s| vocab.encode(s, MAX_SENTENCE_TOKENS))
                .collect(),
            titles: doc
                .sections
                .iter()
                .map(|s| vocab.encode(&s.title, MAX_TITLE_TOKENS))
                .collect(),
            section_of: doc.section_membership(),
        }
    }

    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn num_sections(&self) -> usize {
        self.titles.len()
    }

    /// Sentence indices of each section, ascending.
    pub fn section_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.num_sections()];
        for (i, &k) in self.section_of.iter().enumerate() {
            members[k].push(i);
        }
        members
    }
}

/// Moves `floor(rate * n)` uniformly chosen sentences to uniformly chosen
/// other sections. Sentence order and content are untouched.
pub fn scramble_sections(
    doc: &TokenizedDocument,
    rate: f64,
    seed: u64,
) -> Result<TokenizedDocument> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(GosumError::InvalidArgument(format!(
            "scramble rate {rate} outside [0, 1]"
        )));
    }
    let mut out = doc.clone();
    let sections = doc.num_sections();
    if sections < 2 {
        return Ok(out);
    }
    let n = doc.num_sentences();
    let count = ((rate * n as f64) + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, n, count.min(n)).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let current = out.section_of[i];
        let pick = rng.gen_range(0..sections - 1);
        out.section_of[i] = if pick >= current { pick + 1 } else { pick };
    }
    Ok(out)
}

/// Replaces the k-th section title with `section k`.
pub fn mask_section_titles(doc: &StructuredDocument) -> StructuredDocument {
    let mut out = doc.clone();
    for (k, s) in out.sections.iter_mut().enumerate() {
        s.title = format!("section {k}");
    }
    out
}
