//! The full extractor: node initialisation, message passing, global context,
//! extraction history and the policy heads over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingTable, StructuredDocument, TokenizedDocument, Vocabulary};
use crate::encoders::{
    DiscourseEncoder, DocGraph, GlobalContextEncoder, MessagePassing, NodeInitializer,
};
use crate::error::{GosumError, Result};
use crate::history::{ExtractionContext, HistoryEncoder};
use crate::params::ParamStore;
use crate::policy::{assemble_state, Extractor, StepVars};
use crate::tensor::{Tape, Var};

pub const EMBEDDING_PARAM: &str = "embedding";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub lstm_hidden: usize,
    /// Node width `d`.
    pub width: usize,
    /// Global context width `d_g`.
    pub global_width: usize,
    pub gat_heads: usize,
    pub pool_heads: usize,
    pub history_layers: usize,
    pub history_heads: usize,
    pub stop_pool_heads: usize,
    /// Use the query node, not the neighbour, in the attention value term.
    pub eq8_literal: bool,
    pub history_positions: bool,
    /// Run message passing. Without it the node features go straight to the
    /// policy and each sentence's section feature is appended to its state.
    pub use_graph: bool,
    pub use_sec2sec: bool,
    pub train_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            word_dim: 200,
            lstm_hidden: 128,
            width: 256,
            global_width: 256,
            gat_heads: 8,
            pool_heads: 4,
            history_layers: 3,
            history_heads: 8,
            stop_pool_heads: 4,
            eq8_literal: false,
            history_positions: true,
            use_graph: true,
            use_sec2sec: true,
            train_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("word_dim", self.word_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("width", self.width),
            ("global_width", self.global_width),
            ("gat_heads", self.gat_heads),
            ("pool_heads", self.pool_heads),
            ("history_heads", self.history_heads),
            ("stop_pool_heads", self.stop_pool_heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(GosumError::InvalidArgument(format!(
                "{name} must be positive"
            )));
        }
        for (name, heads) in [
            ("gat_heads", self.gat_heads),
            ("pool_heads", self.pool_heads),
            ("history_heads", self.history_heads),
        ] {
            if !self.width.is_multiple_of(heads) {
                return Err(GosumError::InvalidArgument(format!(
                    "width {} is not divisible by {name} = {heads}",
                    self.width
                )));
            }
        }
        if !self.global_width.is_multiple_of(2) {
            return Err(GosumError::InvalidArgument(format!(
                "global_width {} must be even",
                self.global_width
            )));
        }
        Ok(())
    }

    /// Width of one policy state row.
    pub fn state_width(&self) -> usize {
        let blocks = if self.use_graph { 2 } else { 3 };
        blocks * self.width + self.global_width
    }
}

#[derive(Debug, Clone)]
struct Modules {
    init: NodeInitializer,
    discourse: Option<DiscourseEncoder>,
    global: GlobalContextEncoder,
    history: HistoryEncoder,
    extractor: Extractor,
}

impl Modules {
    fn build(
        config: &ModelConfig,
        store: &mut ParamStore,
        embeddings: crate::tensor::Matrix,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = store.add(EMBEDDING_PARAM, embeddings, config.train_embeddings);
        let d = config.width;
        let init = NodeInitializer::new(
            store,
            embedding,
            config.lstm_hidden,
            d,
            config.pool_heads,
            &mut rng,
        );
        let discourse = config.use_graph.then(|| {
            DiscourseEncoder::new(store, d, config.gat_heads, config.eq8_literal, &mut rng)
        });
        let global = GlobalContextEncoder::new(store, d, config.global_width, &mut rng);
        let history = HistoryEncoder::new(
            store,
            d,
            config.history_layers,
            config.history_heads,
            config.history_positions,
            &mut rng,
        );
        let extractor = Extractor::new(
            store,
            config.state_width(),
            config.stop_pool_heads,
            &mut rng,
        );
        Self {
            init,
            discourse,
            global,
            history,
            extractor,
        }
    }
}

/// Document-level encodings on a tape, computed once per document and
/// reused at every extraction step.
#[derive(Debug, Clone)]
pub struct DocEncoding {
    pub num_sentences: usize,
    pub h_s0: Var,
    pub h_c0: Var,
    /// Absent without message passing.
    pub message_passing: Option<MessagePassing>,
    /// Input of the history encoder (`H_s^1`, or `H_s^0` without the graph).
    pub sentences: Var,
    pub global: Var,
    /// Per-sentence blocks of the policy state, before the history block.
    pub state_blocks: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct GosumModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    modules: Modules,
}

impl GosumModel {
    pub fn new(config: ModelConfig, embeddings: EmbeddingTable, seed: u64) -> Result<Self> {
        config.validate()?;
        if embeddings.dim() != config.word_dim {
            return Err(GosumError::InvalidArgument(format!(
                "embedding width {} does not match word_dim {}",
                embeddings.dim(),
                config.word_dim
            )));
        }
        let mut params = ParamStore::new();
        let modules = Modules::build(&config, &mut params, embeddings.vectors, seed);
        Ok(Self {
            config,
            vocab: embeddings.vocab,
            params,
            modules,
        })
    }

    /// Reassembles a model from saved parts. Parameter names and shapes must
    /// be exactly those the configuration builds.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let embedding = params
            .find(EMBEDDING_PARAM)
            .ok_or_else(|| GosumError::Checkpoint("missing embedding parameter".into()))?;
        let table = params.value(embedding).clone();
        if table.nrows() != vocab.len() || table.ncols() != config.word_dim {
            return Err(GosumError::Checkpoint(format!(
                "embedding table is {}x{}, expected {}x{}",
                table.nrows(),
                table.ncols(),
                vocab.len(),
                config.word_dim
            )));
        }
        let mut expected = ParamStore::new();
        let modules = Modules::build(&config, &mut expected, table, 0);
        if expected.len() != params.len() {
            return Err(GosumError::Checkpoint(format!(
                "checkpoint has {} parameters, configuration builds {}",
                params.len(),
                expected.len()
            )));
        }
        for id in expected.ids() {
            if expected.name(id) != params.name(id)
                || expected.value(id).dim() != params.value(id).dim()
            {
                return Err(GosumError::Checkpoint(format!(
                    "parameter {} is {} {:?}, expected {} {:?}",
                    id.0,
                    params.name(id),
                    params.value(id).dim(),
                    expected.name(id),
                    expected.value(id).dim()
                )));
            }
        }
        Ok(Self {
            config,
            vocab,
            params,
            modules,
        })
    }

    pub fn tokenize(&self, doc: &StructuredDocument) -> TokenizedDocument {
        TokenizedDocument::new(doc, &self.vocab)
    }

    pub fn encode(&self, tape: &mut Tape, doc: &TokenizedDocument) -> Result<DocEncoding> {
        let n = doc.num_sentences();
        if n == 0 || doc.num_sections() == 0 {
            return Err(GosumError::Document {
                doc_id: doc.doc_id.clone(),
                message: "document has no sentences".into(),
            });
        }
        if let Some(&k) = doc.section_of.iter().find(|&&k| k >= doc.num_sections()) {
            return Err(GosumError::Document {
                doc_id: doc.doc_id.clone(),
                message: format!("sentence assigned to missing section {k}"),
            });
        }
        if doc.section_of.len() != n {
            return Err(GosumError::Document {
                doc_id: doc.doc_id.clone(),
                message: "section membership does not cover every sentence".into(),
            });
        }
        let (h_s0, h_c0) = self.modules.init.forward(tape, doc)?;
        match &self.modules.discourse {
            Some(discourse) => {
                let graph = DocGraph::build(doc);
                let mp = discourse.forward(tape, h_s0, h_c0, &graph, self.config.use_sec2sec)?;
                let sentences = mp.h_s1;
                let global = self.modules.global.forward(tape, sentences);
                Ok(DocEncoding {
                    num_sentences: n,
                    h_s0,
                    h_c0,
                    message_passing: Some(mp),
                    sentences,
                    global,
                    state_blocks: vec![sentences, global],
                })
            }
            None => {
                let global = self.modules.global.forward(tape, h_s0);
                let own_section = tape.gather_rows(h_c0, &doc.section_of);
                Ok(DocEncoding {
                    num_sentences: n,
                    h_s0,
                    h_c0,
                    message_passing: None,
                    sentences: h_s0,
                    global,
                    state_blocks: vec![h_s0, global, own_section],
                })
            }
        }
    }

    /// Policy outputs for the remaining sentences of `ctx`.
    pub fn step(
        &self,
        tape: &mut Tape,
        enc: &DocEncoding,
        ctx: &ExtractionContext,
    ) -> Result<StepVars> {
        if ctx.num_sentences() != enc.num_sentences {
            return Err(GosumError::Shape(format!(
                "context over {} sentences for a document of {}",
                ctx.num_sentences(),
                enc.num_sentences
            )));
        }
        let history = self.modules.history.forward(tape, enc.sentences, ctx)?;
        let state = assemble_state(tape, &enc.state_blocks, history, ctx)?;
        self.modules.extractor.forward(tape, state)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::Section;
    use crate::policy::StepDecision;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            word_dim: 3,
            lstm_hidden: 2,
            width: 4,
            global_width: 4,
            gat_heads: 2,
            pool_heads: 2,
            history_layers: 1,
            history_heads: 2,
            stop_pool_heads: 2,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn tiny_doc() -> StructuredDocument {
        StructuredDocument {
            id: "tiny".into(),
            abstract_sentences: vec!["the cat sat .".into()],
            sections: vec![
                Section {
                    title: "intro".into(),
                    sentences: vec!["the cat sat".into(), "a dog ran".into()],
                },
                Section {
                    title: "method".into(),
                    sentences: vec!["the cat ran".into()],
                },
            ],
        }
    }

    pub(crate) fn tiny_model(config: ModelConfig) -> GosumModel {
        let doc = tiny_doc();
        let vocab = Vocabulary::from_documents(std::slice::from_ref(&doc), 100);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = EmbeddingTable::random(vocab, config.word_dim, &mut rng);
        GosumModel::new(config, table, 5).unwrap()
    }

    fn decision(
        model: &GosumModel,
        doc: &TokenizedDocument,
        ctx: &ExtractionContext,
    ) -> StepDecision {
        let mut tape = Tape::new(&model.params);
        let enc = model.encode(&mut tape, doc).unwrap();
        let vars = model.step(&mut tape, &enc, ctx).unwrap();
        StepDecision::from_vars(&tape, vars, ctx)
    }

    #[test]
    fn state_width_by_mode() {
        let c = ModelConfig::default();
        assert_eq!(c.state_width(), 768);
        let c = ModelConfig {
            use_graph: false,
            ..c
        };
        assert_eq!(c.state_width(), 1024);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ModelConfig {
            gat_heads: 3,
            ..tiny_config()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            global_width: 5,
            ..tiny_config()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn every_mode_produces_a_normalized_step() {
        for (use_graph, use_sec2sec) in [(true, true), (true, false), (false, true)] {
            let model = tiny_model(ModelConfig {
                use_graph,
                use_sec2sec,
                ..tiny_config()
            });
            let doc = model.tokenize(&tiny_doc());
            let mut ctx = ExtractionContext::new(3);
            ctx.extract(1).unwrap();
            let d = decision(&model, &doc, &ctx);
            assert_eq!(d.scores.len(), 2);
            assert!((d.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn section_edges_flag_changes_outputs() {
        let a = tiny_model(tiny_config());
        let b = tiny_model(ModelConfig {
            use_sec2sec: false,
            ..tiny_config()
        });
        let doc = a.tokenize(&tiny_doc());
        let ctx = ExtractionContext::new(3);
        assert_ne!(decision(&a, &doc, &ctx), decision(&b, &doc, &ctx));
    }

    #[test]
    fn from_parts_round_trip_and_mismatch() {
        let model = tiny_model(tiny_config());
        let rebuilt = GosumModel::from_parts(
            model.config.clone(),
            model.vocab.clone(),
            model.params.clone(),
        )
        .unwrap();
        let doc = model.tokenize(&tiny_doc());
        let ctx = ExtractionContext::new(3);
        assert_eq!(decision(&model, &doc, &ctx), decision(&rebuilt, &doc, &ctx));
        let other = ModelConfig {
            history_layers: 2,
            ..tiny_config()
        };
        assert!(GosumModel::from_parts(other, model.vocab.clone(), model.params.clone()).is_err());
    }

    #[test]
    fn embeddings_are_frozen_unless_requested() {
        let model = tiny_model(tiny_config());
        let id = model.params.find(EMBEDDING_PARAM).unwrap();
        assert!(!model.params.is_trainable(id));
        let model = tiny_model(ModelConfig {
            train_embeddings: true,
            ..tiny_config()
        });
        assert!(model.params.is_trainable(id));
    }

    #[test]
    fn bad_documents_are_errors() {
        let model = tiny_model(tiny_config());
        let mut doc = model.tokenize(&tiny_doc());
        doc.section_of[0] = 9;
        let mut tape = Tape::new(&model.params);
        assert!(model.encode(&mut tape, &doc).is_err());
        let empty = TokenizedDocument {
            doc_id: "e".into(),
            sentences: vec![],
            titles: vec![],
            section_of: vec![],
        };
        assert!(model.encode(&mut tape, &empty).is_err());
    }
}
