//! Discourse-aware sentence encoding.
//!
//! Sentences and sections become nodes of a two-type graph (no word nodes):
//! every sentence is linked to its own section and the sections form a
//! complete graph. Node features come from a BiLSTM with multi-head pooling
//! over word vectors, are refined by three single-layer graph attention
//! stages (sentence to section, section to section, section to sentence),
//! and are finally read by a document-level BiLSTM.

use std::ops::Range;

use rand::Rng;

use crate::corpus::TokenizedDocument;
use crate::error::{GosumError, Result};
use crate::nn::{BiLstm, FeedForward, Linear, MultiHeadPooling};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Var};

/// Sentence/section graph of one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocGraph {
    section_of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl DocGraph {
    pub fn build(doc: &TokenizedDocument) -> Self {
        Self {
            section_of: doc.section_of.clone(),
            members: doc.section_members(),
        }
    }

    pub fn num_sentences(&self) -> usize {
        self.section_of.len()
    }

    pub fn num_sections(&self) -> usize {
        self.members.len()
    }

    pub fn section_of(&self) -> &[usize] {
        &self.section_of
    }

    /// Undirected sentence-section edges as `(sentence, section)`, one per
    /// sentence, in sentence order.
    pub fn sentence_section_edges(&self) -> Vec<(usize, usize)> {
        self.section_of.iter().copied().enumerate().collect()
    }

    /// Undirected section-section edges `(a, b)` with `a < b`.
    pub fn section_section_edges(&self) -> Vec<(usize, usize)> {
        let m = self.num_sections();
        (0..m)
            .flat_map(|a| (a + 1..m).map(move |b| (a, b)))
            .collect()
    }

    /// Sections attend to their member sentences.
    pub fn sentence_to_section(&self) -> Adjacency {
        Adjacency::new(self.members.clone())
    }

    /// Sections attend to every other section.
    pub fn section_to_section(&self) -> Adjacency {
        let m = self.num_sections();
        Adjacency::new(
            (0..m)
                .map(|a| (0..m).filter(|&b| b != a).collect())
                .collect(),
        )
    }

    /// Sentences attend to their own section.
    pub fn section_to_sentence(&self) -> Adjacency {
        Adjacency::new(self.section_of.iter().map(|&k| vec![k]).collect())
    }
}

/// Neighbour lists of the query nodes of one attention stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn new(neighbors: Vec<Vec<usize>>) -> Self {
        Self { neighbors }
    }

    pub fn num_queries(&self) -> usize {
        self.neighbors.len()
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn neighbors(&self, query: usize) -> &[usize] {
        &self.neighbors[query]
    }

    /// Flattened `(query, neighbour)` edge lists and each query's row range.
    fn flatten(&self) -> (Vec<usize>, Vec<usize>, Vec<Range<usize>>) {
        let mut queries = Vec::new();
        let mut keys = Vec::new();
        let mut segments = Vec::with_capacity(self.neighbors.len());
        for (q, ns) in self.neighbors.iter().enumerate() {
            let start = keys.len();
            for &k in ns {
                queries.push(q);
                keys.push(k);
            }
            segments.push(start..keys.len());
        }
        (queries, keys, segments)
    }
}

/// Word vectors through a BiLSTM and multi-head pooling, separately for
/// sentences and section titles.
#[derive(Debug, Clone)]
pub struct NodeInitializer {
    embedding: ParamId,
    sentence_lstm: BiLstm,
    sentence_pool: MultiHeadPooling,
    title_lstm: BiLstm,
    title_pool: MultiHeadPooling,
}

impl NodeInitializer {
    pub fn new(
        store: &mut ParamStore,
        embedding: ParamId,
        lstm_hidden: usize,
        width: usize,
        pool_heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let word_dim = store.value(embedding).ncols();
        Self {
            embedding,
            sentence_lstm: BiLstm::new(store, "init.sentence_lstm", word_dim, lstm_hidden, rng),
            sentence_pool: MultiHeadPooling::new(
                store,
                "init.sentence_pool",
                2 * lstm_hidden,
                width,
                pool_heads,
                rng,
            ),
            title_lstm: BiLstm::new(store, "init.title_lstm", word_dim, lstm_hidden, rng),
            title_pool: MultiHeadPooling::new(
                store,
                "init.title_pool",
                2 * lstm_hidden,
                width,
                pool_heads,
                rng,
            ),
        }
    }

    /// Initial sentence (`n x d`) and section (`m x d`) node features.
    pub fn forward(&self, tape: &mut Tape, doc: &TokenizedDocument) -> Result<(Var, Var)> {
        let vocab_rows = tape.params().value(self.embedding).nrows();
        let as_rows = |seqs: &[Vec<u32>]| -> Result<Vec<Vec<usize>>> {
            seqs.iter()
                .map(|s| {
                    if s.is_empty() {
                        return Err(GosumError::Document {
                            doc_id: doc.doc_id.clone(),
                            message: "empty token sequence".into(),
                        });
                    }
                    s.iter()
                        .map(|&id| {
                            let id = id as usize;
                            if id < vocab_rows {
                                Ok(id)
                            } else {
                                Err(GosumError::Document {
                                    doc_id: doc.doc_id.clone(),
                                    message: format!(
                                        "token id {id} outside vocabulary of {vocab_rows}"
                                    ),
                                })
                            }
                        })
                        .collect()
                })
                .collect()
        };
        let sentences = as_rows(&doc.sentences)?;
        let titles = as_rows(&doc.titles)?;
        let table = tape.param(self.embedding);
        let (states, segments) = self.sentence_lstm.encode(tape, table, &sentences);
        let h_s0 = self.sentence_pool.forward(tape, states, &segments);
        let (states, segments) = self.title_lstm.encode(tape, table, &titles);
        let h_c0 = self.title_pool.forward(tape, states, &segments);
        Ok((h_s0, h_c0))
    }
}

/// Output of one attention stage: updated query rows and the attention
/// coefficient of every edge (`edges x heads`, grouped by query).
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Var,
    pub attention: Var,
    pub segments: Vec<Range<usize>>,
}

/// Single-layer multi-head graph attention with a residual connection:
///
/// `e_ij = LeakyReLU(W_a [W_q h_i ; W_k h_j])`, `alpha = softmax_j(e_ij)`,
/// `h_i' = W_o ELU(concat_heads sum_j alpha_ij W_v h_j) + h_i`.
///
/// With `value_from_query` set the value term uses `h_i` in place of `h_j`.
#[derive(Debug, Clone)]
pub struct GraphAttention {
    query: Linear,
    key: Linear,
    score_query: Linear,
    score_key: Linear,
    value: Linear,
    output: Linear,
    heads: usize,
    width: usize,
    slope: f64,
    value_from_query: bool,
}

impl GraphAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        value_from_query: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            heads > 0 && width.is_multiple_of(heads),
            "GAT width {width} not divisible by {heads} heads"
        );
        Self {
            query: Linear::new(store, &format!("{name}.w_q"), width, width, false, rng),
            key: Linear::new(store, &format!("{name}.w_k"), width, width, false, rng),
            score_query: Linear::new(store, &format!("{name}.w_a_q"), width, heads, false, rng),
            score_key: Linear::new(store, &format!("{name}.w_a_k"), width, heads, false, rng),
            value: Linear::new(store, &format!("{name}.w_v"), width, width, false, rng),
            output: Linear::new(store, &format!("{name}.w_o"), width, width, false, rng),
            heads,
            width,
            slope: 0.2,
            value_from_query,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        queries: Var,
        keys: Var,
        adjacency: &Adjacency,
    ) -> Result<AttentionOutput> {
        let (qn, qw) = tape.shape(queries);
        let (kn, kw) = tape.shape(keys);
        if qw != self.width || kw != self.width {
            return Err(GosumError::Shape(format!(
                "graph attention expects width {}, got queries {qw} and keys {kw}",
                self.width
            )));
        }
        if adjacency.num_queries() != qn {
            return Err(GosumError::Shape(format!(
                "adjacency has {} queries for {qn} query rows",
                adjacency.num_queries()
            )));
        }
        if let Some(bad) = adjacency.neighbors.iter().flatten().find(|&&k| k >= kn) {
            return Err(GosumError::Shape(format!(
                "neighbour {bad} outside {kn} key rows"
            )));
        }
        let (edge_q, edge_k, segments) = adjacency.flatten();
        if edge_q.is_empty() {
            let attention = tape.zeros(0, self.heads);
            return Ok(AttentionOutput {
                output: queries,
                attention,
                segments,
            });
        }

        let q = self.query.forward(tape, queries);
        let k = self.key.forward(tape, keys);
        let sq = self.score_query.forward(tape, q);
        let sk = self.score_key.forward(tape, k);
        let eq = tape.gather_rows(sq, &edge_q);
        let ek = tape.gather_rows(sk, &edge_k);
        let logits = tape.add(eq, ek);
        let logits = tape.leaky_relu(logits, self.slope);
        let attention = tape.segment_softmax(logits, &segments);
        let values = if self.value_from_query {
            let v = self.value.forward(tape, queries);
            tape.gather_rows(v, &edge_q)
        } else {
            let v = self.value.forward(tape, keys);
            tape.gather_rows(v, &edge_k)
        };
        let aggregated = tape.segment_weighted_sum(attention, values, &segments);
        let activated = tape.elu(aggregated);
        let projected = self.output.forward(tape, activated);
        let output = tape.add(projected, queries);
        Ok(AttentionOutput {
            output,
            attention,
            segments,
        })
    }
}

/// Results of the three message-passing stages.
#[derive(Debug, Clone)]
pub struct MessagePassing {
    pub h_c1: Var,
    pub h_c2: Var,
    pub h_s1: Var,
    pub sentence_to_section: AttentionOutput,
    /// Absent when section-section edges are disabled.
    pub section_to_section: Option<AttentionOutput>,
    pub section_to_sentence: AttentionOutput,
}

#[derive(Debug, Clone)]
pub struct DiscourseEncoder {
    sentence_to_section: GraphAttention,
    section_ffn: FeedForward,
    section_to_section: GraphAttention,
    section_section_ffn: FeedForward,
    section_to_sentence: GraphAttention,
    sentence_ffn: FeedForward,
}

impl DiscourseEncoder {
    pub fn new(
        store: &mut ParamStore,
        width: usize,
        heads: usize,
        value_from_query: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let inner = 2 * width;
        Self {
            sentence_to_section: GraphAttention::new(
                store,
                "graph.s2c",
                width,
                heads,
                value_from_query,
                rng,
            ),
            section_ffn: FeedForward::new(store, "graph.s2c_ffn", width, inner, rng),
            section_to_section: GraphAttention::new(
                store,
                "graph.c2c",
                width,
                heads,
                value_from_query,
                rng,
            ),
            section_section_ffn: FeedForward::new(store, "graph.c2c_ffn", width, inner, rng),
            section_to_sentence: GraphAttention::new(
                store,
                "graph.c2s",
                width,
                heads,
                value_from_query,
                rng,
            ),
            sentence_ffn: FeedForward::new(store, "graph.c2s_ffn", width, inner, rng),
        }
    }

    /// Sentence to section, section to section, then section to sentence.
    /// Without section-section edges the second stage is skipped and `H_c^1`
    /// serves as the keys of the last stage.
    pub fn forward(
        &self,
        tape: &mut Tape,
        h_s0: Var,
        h_c0: Var,
        graph: &DocGraph,
        section_edges: bool,
    ) -> Result<MessagePassing> {
        let (n, m) = (tape.shape(h_s0).0, tape.shape(h_c0).0);
        if n != graph.num_sentences() || m != graph.num_sections() {
            return Err(GosumError::Shape(format!(
                "node features {n}x{m} do not match graph {}x{}",
                graph.num_sentences(),
                graph.num_sections()
            )));
        }
        let s2c =
            self.sentence_to_section
                .forward(tape, h_c0, h_s0, &graph.sentence_to_section())?;
        let h_c1 = self.section_ffn.residual(tape, s2c.output);
        let (h_c2, c2c) = if section_edges {
            let c2c =
                self.section_to_section
                    .forward(tape, h_c1, h_c1, &graph.section_to_section())?;
            (
                self.section_section_ffn.residual(tape, c2c.output),
                Some(c2c),
            )
        } else {
            (h_c1, None)
        };
        let c2s =
            self.section_to_sentence
                .forward(tape, h_s0, h_c2, &graph.section_to_sentence())?;
        let h_s1 = self.sentence_ffn.residual(tape, c2s.output);
        Ok(MessagePassing {
            h_c1,
            h_c2,
            h_s1,
            sentence_to_section: s2c,
            section_to_section: c2c,
            section_to_sentence: c2s,
        })
    }
}

/// BiLSTM over the document's sentence embeddings in order.
#[derive(Debug, Clone)]
pub struct GlobalContextEncoder {
    lstm: BiLstm,
}

impl GlobalContextEncoder {
    pub fn new(store: &mut ParamStore, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        assert!(
            output.is_multiple_of(2),
            "global context width must be even"
        );
        Self {
            lstm: BiLstm::new(store, "global.lstm", input, output / 2, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, sentences: Var) -> Var {
        let n = tape.shape(sentences).0;
        let (states, _) = self.lstm.encode(tape, sentences, &[(0..n).collect()]);
        states
    }
}
