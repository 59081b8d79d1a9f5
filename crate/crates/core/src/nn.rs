//! Layer building blocks shared by the encoders and the extractor.

use std::ops::Range;

use ndarray::Array2;
use rand::Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), input, output, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), 1, output));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Single-direction LSTM with fused gate weights over `[x; h]`.
#[derive(Debug, Clone)]
pub struct Lstm {
    weight: ParamId,
    bias: ParamId,
    hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), input + hidden, 4 * hidden, rng);
        let bias = store.add_zeros(format!("{name}.bias"), 1, 4 * hidden);
        Self {
            weight,
            bias,
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Runs the cell over `steps`, each a `batch x input` matrix, and returns
    /// the hidden state after every step.
    pub fn run(&self, tape: &mut Tape, steps: &[Var]) -> Vec<Var> {
        let Some(&first) = steps.first() else {
            return Vec::new();
        };
        let batch = tape.shape(first).0;
        let h_dim = self.hidden;
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let mut h = tape.zeros(batch, h_dim);
        let mut c = tape.zeros(batch, h_dim);
        let mut outputs = Vec::with_capacity(steps.len());
        for &x in steps {
            let xh = tape.hcat(&[x, h]);
            let z = tape.matmul(xh, w);
            let z = tape.add_row(z, b);
            let i = tape.cols(z, 0..h_dim);
            let i = tape.sigmoid(i);
            let f = tape.cols(z, h_dim..2 * h_dim);
            let f = tape.sigmoid(f);
            let g = tape.cols(z, 2 * h_dim..3 * h_dim);
            let g = tape.tanh(g);
            let o = tape.cols(z, 3 * h_dim..4 * h_dim);
            let o = tape.sigmoid(o);
            let keep = tape.mul(f, c);
            let write = tape.mul(i, g);
            c = tape.add(keep, write);
            let squashed = tape.tanh(c);
            h = tape.mul(o, squashed);
            outputs.push(h);
        }
        outputs
    }
}

/// Bidirectional LSTM over a batch of variable-length sequences.
#[derive(Debug, Clone)]
pub struct BiLstm {
    forward: Lstm,
    backward: Lstm,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            forward: Lstm::new(store, &format!("{name}.fwd"), input, hidden, rng),
            backward: Lstm::new(store, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    pub fn output_width(&self) -> usize {
        2 * self.forward.hidden
    }

    /// Encodes sequences whose elements are row indices into `source`.
    ///
    /// Returns a `total_len x 2*hidden` matrix in which each sequence occupies
    /// a contiguous block of rows (in input order), position `i` holding
    /// `[forward state at i; backward state at i]`, together with the row
    /// range of each sequence. Every sequence must be non-empty.
    pub fn encode(
        &self,
        tape: &mut Tape,
        source: Var,
        sequences: &[Vec<usize>],
    ) -> (Var, Vec<Range<usize>>) {
        assert!(
            sequences.iter().all(|s| !s.is_empty()),
            "BiLstm::encode on an empty sequence"
        );
        let batch = sequences.len();
        let max_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let reversed: Vec<Vec<usize>> = sequences
            .iter()
            .map(|s| s.iter().rev().copied().collect())
            .collect();

        // Past a sequence's end its rows are fed padding; those outputs are
        // never gathered so they cannot leak into real positions.
        let step_inputs = |seqs: &[Vec<usize>], tape: &mut Tape| -> Vec<Var> {
            (0..max_len)
                .map(|t| {
                    let idx: Vec<usize> = seqs
                        .iter()
                        .map(|s| s.get(t).copied().unwrap_or(0))
                        .collect();
                    tape.gather_rows(source, &idx)
                })
                .collect()
        };
        let fwd_in = step_inputs(sequences, tape);
        let bwd_in = step_inputs(&reversed, tape);
        let fwd = self.forward.run(tape, &fwd_in);
        let bwd = self.backward.run(tape, &bwd_in);
        let fwd_all = tape.vcat(&fwd);
        let bwd_all = tape.vcat(&bwd);

        let mut fwd_rows = Vec::new();
        let mut bwd_rows = Vec::new();
        let mut segments = Vec::with_capacity(batch);
        for (s, seq) in sequences.iter().enumerate() {
            let start = fwd_rows.len();
            let len = seq.len();
            for i in 0..len {
                fwd_rows.push(i * batch + s);
                bwd_rows.push((len - 1 - i) * batch + s);
            }
            segments.push(start..start + len);
        }
        let f = tape.gather_rows(fwd_all, &fwd_rows);
        let b = tape.gather_rows(bwd_all, &bwd_rows);
        (tape.hcat(&[f, b]), segments)
    }
}

/// Attention-weighted pooling of variable-length row blocks into one vector
/// per block, computed independently per head and concatenated.
#[derive(Debug, Clone)]
pub struct MultiHeadPooling {
    score: Linear,
    value: Linear,
    heads: usize,
}

impl MultiHeadPooling {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            heads > 0 && output.is_multiple_of(heads),
            "pooling width {output} not divisible by {heads} heads"
        );
        Self {
            score: Linear::new(store, &format!("{name}.score"), input, heads, true, rng),
            value: Linear::new(store, &format!("{name}.value"), input, output, true, rng),
            heads,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Pools each segment of `states` into one row.
    pub fn forward(&self, tape: &mut Tape, states: Var, segments: &[Range<usize>]) -> Var {
        let scores = self.score.forward(tape, states);
        let weights = tape.segment_softmax(scores, segments);
        let values = self.value.forward(tape, states);
        tape.segment_weighted_sum(weights, values, segments)
    }
}

/// Two affine maps with a ReLU between, applied as a residual update.
#[derive(Debug, Clone)]
pub struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        inner: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), width, inner, true, rng),
            outer: Linear::new(store, &format!("{name}.outer"), inner, width, true, rng),
        }
    }

    /// `x + W2 relu(W1 x + b1) + b2`
    pub fn residual(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.inner.forward(tape, x);
        let h = tape.relu(h);
        let y = self.outer.forward(tape, h);
        tape.add(x, y)
    }
}

/// Scaled dot-product multi-head attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    heads: usize,
    width: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            heads > 0 && width.is_multiple_of(heads),
            "attention width {width} not divisible by {heads} heads"
        );
        Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, false, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, false, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, false, rng),
            output: Linear::new(store, &format!("{name}.output"), width, width, false, rng),
            heads,
            width,
        }
    }

    /// Attends from each row of `queries` to the rows of `keys` allowed by
    /// `mask` (`queries x keys`). Query rows with nothing to attend to get a
    /// zero update.
    pub fn forward(
        &self,
        tape: &mut Tape,
        queries: Var,
        keys: Var,
        mask: Option<&Array2<bool>>,
    ) -> Var {
        let q = self.query.forward(tape, queries);
        let k = self.key.forward(tape, keys);
        let v = self.value.forward(tape, keys);
        let head_dim = self.width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let qh = tape.cols(q, cols.clone());
            let kh = tape.cols(k, cols.clone());
            let vh = tape.cols(v, cols);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores, mask);
            outputs.push(tape.matmul(attn, vh));
        }
        let joined = tape.hcat(&outputs);
        self.output.forward(tape, joined)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn bilstm_batched_matches_one_at_a_time() {
        let mut rng = rng();
        let mut store = ParamStore::new();
        let source =
            Matrix::from_shape_fn((6, 3), |(r, c)| (r as f64 * 0.3 - c as f64 * 0.2).sin());
        let lstm = BiLstm::new(&mut store, "lstm", 3, 4, &mut rng);
        let seqs = vec![vec![1, 2, 3], vec![4], vec![5, 1]];
        let mut tape = Tape::new(&store);
        let src = tape.constant(source.clone());
        let (all, segments) = lstm.encode(&mut tape, src, &seqs);
        assert_eq!(segments, vec![0..3, 3..4, 4..6]);
        let all = tape.value(all).clone();
        for (seq, seg) in seqs.iter().zip(&segments) {
            let mut t = Tape::new(&store);
            let src = t.constant(source.clone());
            let (one, _) = lstm.encode(&mut t, src, std::slice::from_ref(seq));
            let one = t.value(one);
            for (i, row) in seg.clone().enumerate() {
                for c in 0..8 {
                    assert!((one[[i, c]] - all[[row, c]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bilstm_is_order_sensitive() {
        let mut rng = rng();
        let mut store = ParamStore::new();
        let source = Matrix::from_shape_fn((4, 2), |(r, c)| (r + 2 * c) as f64 * 0.25);
        let lstm = BiLstm::new(&mut store, "lstm", 2, 3, &mut rng);
        let mut tape = Tape::new(&store);
        let src = tape.constant(source);
        let (a, _) = lstm.encode(&mut tape, src, &[vec![1, 2, 3]]);
        let (b, _) = lstm.encode(&mut tape, src, &[vec![3, 2, 1]]);
        let first_a = tape.value(a).row(0).to_owned();
        let last_b = tape.value(b).row(2).to_owned();
        assert!(first_a
            .iter()
            .zip(last_b.iter())
            .any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn pooling_over_one_row_is_its_projection() {
        let mut rng = rng();
        let mut store = ParamStore::new();
        let pool = MultiHeadPooling::new(&mut store, "pool", 3, 4, 2, &mut rng);
        let x = Matrix::from_shape_vec((1, 3), vec![0.3, -0.7, 1.1]).unwrap();
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x);
        let pooled = pool.forward(&mut tape, xv, std::slice::from_ref(&(0..1)));
        let projected = pool.value.forward(&mut tape, xv);
        assert_eq!(tape.value(pooled), tape.value(projected));
    }

    #[test]
    fn feed_forward_with_zero_output_layer_is_identity() {
        let mut rng = rng();
        let mut store = ParamStore::new();
        let ffn = FeedForward::new(&mut store, "ffn", 3, 6, &mut rng);
        store.fill_prefix("ffn.outer", 0.0);
        let x = Matrix::from_shape_fn((2, 3), |(r, c)| r as f64 - c as f64);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let y = ffn.residual(&mut tape, xv);
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn attention_with_no_allowed_keys_is_zero() {
        let mut rng = rng();
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut rng);
        let x = Matrix::from_shape_fn((2, 4), |(r, c)| (r * 4 + c) as f64 * 0.1);
        let mask = Array2::from_elem((2, 2), false);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x);
        let y = mha.forward(&mut tape, xv, xv, Some(&mask));
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }
}
