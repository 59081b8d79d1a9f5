//! Extraction history encoding: embeddings of the not-yet-extracted
//! sentences conditioned on the sentences already extracted.

use ndarray::Array2;
use rand::Rng;

use crate::error::{GosumError, Result};
use crate::nn::{FeedForward, MultiHeadAttention};
use crate::params::ParamStore;
use crate::tensor::{Matrix, Tape, Var};

/// Which sentences are extracted (in extraction order) and which remain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionContext {
    num_sentences: usize,
    extracted: Vec<usize>,
    remaining: Vec<usize>,
}

impl ExtractionContext {
    /// Nothing extracted yet; every sentence remains, in index order.
    pub fn new(num_sentences: usize) -> Self {
        Self {
            num_sentences,
            extracted: Vec::new(),
            remaining: (0..num_sentences).collect(),
        }
    }

    /// Explicit context; `remaining` may be in any order.
    pub fn from_parts(
        num_sentences: usize,
        extracted: Vec<usize>,
        remaining: Vec<usize>,
    ) -> Result<Self> {
        let mut seen = vec![false; num_sentences];
        for &i in extracted.iter().chain(&remaining) {
            if i >= num_sentences || std::mem::replace(&mut seen[i], true) {
                return Err(GosumError::InvalidArgument(format!(
                    "sentence {i} repeated or outside 0..{num_sentences} in extraction context"
                )));
            }
        }
        Ok(Self {
            num_sentences,
            extracted,
            remaining,
        })
    }

    pub fn num_sentences(&self) -> usize {
        self.num_sentences
    }

    pub fn extracted(&self) -> &[usize] {
        &self.extracted
    }

    pub fn remaining(&self) -> &[usize] {
        &self.remaining
    }

    /// 1-based step number.
    pub fn step(&self) -> usize {
        self.extracted.len() + 1
    }

    /// Position of `sentence` among the remaining rows.
    pub fn position(&self, sentence: usize) -> Option<usize> {
        self.remaining.iter().position(|&i| i == sentence)
    }

    pub fn extract(&mut self, sentence: usize) -> Result<()> {
        let pos = self.position(sentence).ok_or_else(|| {
            GosumError::InvalidArgument(format!(
                "sentence {sentence} is not among the remaining sentences"
            ))
        })?;
        self.remaining.remove(pos);
        self.extracted.push(sentence);
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct HistoryLayer {
    remaining_attention: MultiHeadAttention,
    extracted_attention: MultiHeadAttention,
    ffn: FeedForward,
}

/// Stack of identical layers, each attending among the remaining sentences,
/// then from the remaining sentences to the extracted ones, then a
/// position-wise feed-forward update, all residual.
///
/// A remaining sentence does not attend to itself; its own content reaches
/// the output through the residual path. Extracted rows carry an additive
/// sinusoidal encoding of their extraction step unless disabled.
#[derive(Debug, Clone)]
pub struct HistoryEncoder {
    layers: Vec<HistoryLayer>,
    width: usize,
    step_positions: bool,
}

impl HistoryEncoder {
    pub fn new(
        store: &mut ParamStore,
        width: usize,
        layers: usize,
        heads: usize,
        step_positions: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| HistoryLayer {
                remaining_attention: MultiHeadAttention::new(
                    store,
                    &format!("history.{l}.remaining"),
                    width,
                    heads,
                    rng,
                ),
                extracted_attention: MultiHeadAttention::new(
                    store,
                    &format!("history.{l}.extracted"),
                    width,
                    heads,
                    rng,
                ),
                ffn: FeedForward::new(store, &format!("history.{l}.ffn"), width, 2 * width, rng),
            })
            .collect();
        Self {
            layers,
            width,
            step_positions,
        }
    }

    /// `|remaining| x d` history embeddings, rows in `ctx.remaining()` order.
    pub fn forward(&self, tape: &mut Tape, sentences: Var, ctx: &ExtractionContext) -> Result<Var> {
        let (n, w) = tape.shape(sentences);
        if n != ctx.num_sentences() || w != self.width {
            return Err(GosumError::Shape(format!(
                "history encoder expects {} x {}, got {n} x {w}",
                ctx.num_sentences(),
                self.width
            )));
        }
        let rem = ctx.remaining().len();
        let mut x = tape.gather_rows(sentences, ctx.remaining());
        let extracted = if ctx.extracted().is_empty() {
            None
        } else {
            let rows = tape.gather_rows(sentences, ctx.extracted());
            Some(if self.step_positions {
                let pe = tape.constant(step_encoding(ctx.extracted().len(), self.width));
                tape.add(rows, pe)
            } else {
                rows
            })
        };
        let others = Array2::from_shape_fn((rem, rem), |(i, j)| i != j);
        for layer in &self.layers {
            if rem > 1 {
                let update = layer.remaining_attention.forward(tape, x, x, Some(&others));
                x = tape.add(x, update);
            }
            if let Some(e) = extracted {
                let update = layer.extracted_attention.forward(tape, x, e, None);
                x = tape.add(x, update);
            }
            x = layer.ffn.residual(tape, x);
        }
        Ok(x)
    }
}

/// Sinusoidal encodings of steps `0..steps`, `width` columns.
pub fn step_encoding(steps: usize, width: usize) -> Matrix {
    Matrix::from_shape_fn((steps, width), |(pos, i)| {
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
        let angle = pos as f64 / rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
