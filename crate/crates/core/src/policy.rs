//! Per-step extraction state, the stop head and the sentence-scoring head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GosumError, Result};
use crate::history::ExtractionContext;
use crate::nn::{Linear, MultiHeadPooling};
use crate::params::ParamStore;
use crate::tensor::{Tape, Var};

/// Row-wise concatenation of per-sentence blocks, restricted to the
/// remaining sentences.
///
/// `sentence_blocks` are indexed by document sentence (`n` rows each);
/// `history` is already in `ctx.remaining()` order.
pub fn assemble_state(
    tape: &mut Tape,
    sentence_blocks: &[Var],
    history: Var,
    ctx: &ExtractionContext,
) -> Result<Var> {
    let n = ctx.num_sentences();
    let mut parts = Vec::with_capacity(sentence_blocks.len() + 1);
    for &block in sentence_blocks {
        let (rows, _) = tape.shape(block);
        if rows != n {
            return Err(GosumError::Shape(format!(
                "state block has {rows} rows, document has {n} sentences"
            )));
        }
        parts.push(tape.gather_rows(block, ctx.remaining()));
    }
    let (rows, _) = tape.shape(history);
    if rows != ctx.remaining().len() {
        return Err(GosumError::Shape(format!(
            "history block has {rows} rows, {} sentences remain",
            ctx.remaining().len()
        )));
    }
    parts.push(history);
    Ok(tape.hcat(&parts))
}

/// An action at one step: stop, or extract a document sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Stop,
    Extract(usize),
}

/// Tape handles for one step: the stop logit (1 x 1) and the log-softmax
/// over remaining sentences (1 x |remaining|).
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub stop_logit: Var,
    pub log_scores: Var,
}

/// Plain values of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDecision {
    pub p_stop: f64,
    /// Probabilities over `remaining`, in that order.
    pub scores: Vec<f64>,
    pub remaining: Vec<usize>,
}

impl StepDecision {
    pub fn from_vars(tape: &Tape, vars: StepVars, ctx: &ExtractionContext) -> Self {
        Self {
            p_stop: crate::tensor::sigmoid(tape.scalar(vars.stop_logit)),
            scores: tape
                .value(vars.log_scores)
                .iter()
                .map(|l| l.exp())
                .collect(),
            remaining: ctx.remaining().to_vec(),
        }
    }

    /// Remaining sentence with the highest score; ties go to the earliest row.
    pub fn best(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        self.remaining[best]
    }

    pub fn log_likelihood(&self, action: Action) -> Result<f64> {
        match action {
            Action::Stop => Ok(self.p_stop.ln()),
            Action::Extract(i) => {
                let pos = self.remaining.iter().position(|&r| r == i).ok_or_else(|| {
                    GosumError::InvalidArgument(format!(
                        "sentence {i} is not among the remaining sentences"
                    ))
                })?;
                Ok((1.0 - self.p_stop).ln() + self.scores[pos].ln())
            }
        }
    }
}

/// Stop head (pooling, two-layer MLP, sigmoid) and score head (two-layer
/// MLP per row, softmax over rows).
#[derive(Debug, Clone)]
pub struct Extractor {
    stop_pool: MultiHeadPooling,
    stop_hidden: Linear,
    stop_out: Linear,
    score_hidden: Linear,
    score_out: Linear,
    width: usize,
}

impl Extractor {
    pub fn new(
        store: &mut ParamStore,
        width: usize,
        pool_heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let pooled = width.div_ceil(pool_heads) * pool_heads;
        let hidden = (width / 2).max(1);
        Self {
            stop_pool: MultiHeadPooling::new(
                store,
                "extractor.stop_pool",
                width,
                pooled,
                pool_heads,
                rng,
            ),
            stop_hidden: Linear::new(store, "extractor.stop_hidden", pooled, hidden, true, rng),
            stop_out: Linear::new(store, "extractor.stop_out", hidden, 1, true, rng),
            score_hidden: Linear::new(store, "extractor.score_hidden", width, hidden, true, rng),
            score_out: Linear::new(store, "extractor.score_out", hidden, 1, true, rng),
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn forward(&self, tape: &mut Tape, state: Var) -> Result<StepVars> {
        let (rows, w) = tape.shape(state);
        if w != self.width {
            return Err(GosumError::Shape(format!(
                "extractor expects state width {}, got {w}",
                self.width
            )));
        }
        if rows == 0 {
            return Err(GosumError::InvalidArgument(
                "no remaining sentences to score".into(),
            ));
        }
        let pooled = self
            .stop_pool
            .forward(tape, state, std::slice::from_ref(&(0..rows)));
        let h = self.stop_hidden.forward(tape, pooled);
        let h = tape.relu(h);
        let stop_logit = self.stop_out.forward(tape, h);

        let h = self.score_hidden.forward(tape, state);
        let h = tape.relu(h);
        let logits = self.score_out.forward(tape, h);
        let logits = tape.transpose(logits);
        let log_scores = tape.log_softmax_rows(logits);
        Ok(StepVars {
            stop_logit,
            log_scores,
        })
    }
}

/// `log pi(action | state)`: `log p_stop` for stopping,
/// `log(1 - p_stop) + log score` for extracting a remaining sentence.
pub fn step_log_likelihood(
    tape: &mut Tape,
    vars: StepVars,
    action: Action,
    ctx: &ExtractionContext,
) -> Result<Var> {
    match action {
        Action::Stop => Ok(tape.log_sigmoid(vars.stop_logit)),
        Action::Extract(i) => {
            let pos = ctx.position(i).ok_or_else(|| {
                GosumError::InvalidArgument(format!(
                    "sentence {i} is not among the remaining sentences"
                ))
            })?;
            let go = tape.scale(vars.stop_logit, -1.0);
            let go = tape.log_sigmoid(go);
            let pick = tape.pick(vars.log_scores, 0, pos);
            Ok(tape.add_scalars(&[go, pick]))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn extractor(width: usize) -> (ParamStore, Extractor) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let ex = Extractor::new(&mut store, width, 2, &mut rng);
        (store, ex)
    }

    fn decide(store: &ParamStore, ex: &Extractor, state: Matrix) -> StepDecision {
        let rows = state.nrows();
        let mut tape = Tape::new(store);
        let s = tape.constant(state);
        let vars = ex.forward(&mut tape, s).unwrap();
        StepDecision::from_vars(&tape, vars, &ExtractionContext::new(rows))
    }

    #[test]
    fn state_concatenates_blocks_on_remaining_rows() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(Matrix::from_shape_fn((3, 2), |(r, c)| (10 * r + c) as f64));
        let b = tape.constant(Matrix::from_shape_fn((3, 1), |(r, _)| -(r as f64)));
        let ctx = ExtractionContext::from_parts(3, vec![1], vec![2, 0]).unwrap();
        let h = tape.constant(Matrix::from_elem((2, 3), 7.0));
        let s = assemble_state(&mut tape, &[a, b], h, &ctx).unwrap();
        let v = tape.value(s);
        assert_eq!(v.dim(), (2, 6));
        assert_eq!(v.row(0).to_vec(), vec![20.0, 21.0, -2.0, 7.0, 7.0, 7.0]);
        assert_eq!(v.row(1).to_vec(), vec![0.0, 1.0, 0.0, 7.0, 7.0, 7.0]);

        let wrong = tape.constant(Matrix::zeros((3, 3)));
        assert!(assemble_state(&mut tape, &[a], wrong, &ctx).is_err());
    }

    #[test]
    fn normalized_action_space() {
        let (store, ex) = extractor(6);
        let state = Matrix::from_shape_fn((4, 6), |(r, c)| ((r * 6 + c) as f64 * 0.91).cos());
        let d = decide(&store, &ex, state);
        let total = d.p_stop + (1.0 - d.p_stop) * d.scores.iter().sum::<f64>();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(d.p_stop > 0.0 && d.p_stop < 1.0);
        let mass: f64 = std::iter::once(Action::Stop)
            .chain((0..4).map(Action::Extract))
            .map(|a| d.log_likelihood(a).unwrap().exp())
            .sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_remaining_and_identical_rows() {
        let (store, ex) = extractor(4);
        let d = decide(&store, &ex, Matrix::from_elem((1, 4), 0.3));
        assert_eq!(d.scores, vec![1.0]);
        let d = decide(&store, &ex, Matrix::from_elem((3, 4), 0.3));
        for s in d.scores {
            assert!((s - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_evaluated_tiny_instance() {
        let (mut store, ex) = extractor(2);
        // hidden width 1: score_hidden maps [x0, x1] -> x0 - x1, score_out doubles
        let set = |store: &mut ParamStore, name: &str, m: Matrix| {
            let id = store.find(name).unwrap();
            *store.value_mut(id) = m;
        };
        set(
            &mut store,
            "extractor.score_hidden.weight",
            Matrix::from_shape_vec((2, 1), vec![1.0, -1.0]).unwrap(),
        );
        set(
            &mut store,
            "extractor.score_hidden.bias",
            Matrix::zeros((1, 1)),
        );
        set(
            &mut store,
            "extractor.score_out.weight",
            Matrix::from_elem((1, 1), 2.0),
        );
        set(
            &mut store,
            "extractor.score_out.bias",
            Matrix::from_elem((1, 1), 0.5),
        );
        store.fill_prefix("extractor.stop", 0.0);
        let state = Matrix::from_shape_vec((3, 2), vec![1.0, 0.0, 0.0, 1.0, 3.0, 1.0]).unwrap();
        let d = decide(&store, &ex, state);
        // logits: relu(1)*2+.5 = 2.5, relu(-1)*2+.5 = .5, relu(2)*2+.5 = 4.5
        let z = [2.5f64, 0.5, 4.5];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        for (s, v) in d.scores.iter().zip(z) {
            assert!((s - v.exp() / denom).abs() < 1e-14);
        }
        assert_eq!(d.p_stop, 0.5);
        assert_eq!(d.best(), 2);
        assert!((d.log_likelihood(Action::Stop).unwrap() - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn log_likelihood_examples() {
        let d = StepDecision {
            p_stop: 0.5,
            scores: vec![0.5, 0.5],
            remaining: vec![3, 5],
        };
        assert!((d.log_likelihood(Action::Extract(5)).unwrap() - 0.25f64.ln()).abs() < 1e-15);
        assert!((d.log_likelihood(Action::Stop).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert!(d.log_likelihood(Action::Extract(4)).is_err());
    }

    #[test]
    fn tape_likelihood_matches_values_and_rejects_extracted() {
        let (store, ex) = extractor(4);
        let mut tape = Tape::new(&store);
        let s = tape.constant(Matrix::from_shape_fn((3, 4), |(r, c)| {
            (r as f64 - c as f64) * 0.2
        }));
        let ctx = ExtractionContext::from_parts(4, vec![1], vec![0, 2, 3]).unwrap();
        let vars = ex.forward(&mut tape, s).unwrap();
        let d = StepDecision::from_vars(&tape, vars, &ctx);
        for a in [Action::Stop, Action::Extract(2)] {
            let ll = step_log_likelihood(&mut tape, vars, a, &ctx).unwrap();
            assert!((tape.scalar(ll) - d.log_likelihood(a).unwrap()).abs() < 1e-12);
        }
        assert!(step_log_likelihood(&mut tape, vars, Action::Extract(1), &ctx).is_err());
    }

    #[test]
    fn scores_are_permutation_equivariant() {
        let (store, ex) = extractor(4);
        let state = Matrix::from_shape_fn((3, 4), |(r, c)| ((r + 2 * c) as f64).sin());
        let a = decide(&store, &ex, state.clone());
        let permuted = ndarray::stack![ndarray::Axis(0), state.row(2), state.row(0), state.row(1)];
        let b = decide(&store, &ex, permuted);
        for (i, j) in [(0, 2), (1, 0), (2, 1)] {
            assert!((b.scores[i] - a.scores[j]).abs() < 1e-14);
        }
        assert!((a.p_stop - b.p_stop).abs() < 1e-14);
    }

    #[test]
    fn empty_state_and_wrong_width_are_errors() {
        let (store, ex) = extractor(4);
        let mut tape = Tape::new(&store);
        let s = tape.constant(Matrix::zeros((0, 4)));
        assert!(ex.forward(&mut tape, s).is_err());
        let s = tape.constant(Matrix::zeros((2, 5)));
        assert!(ex.forward(&mut tape, s).is_err());
    }
}
