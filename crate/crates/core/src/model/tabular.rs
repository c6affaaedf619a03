//! Lookup-table conditionals: one logit vector per (context, position).
//!
//! The table is indexed by the full context over `[0, N]^d`, so it can represent
//! any set of conditionals exactly. Only useful for tiny `(N, d)`.

use crate::error::{RaddError, Result};
use crate::model::{
    softmax, softmax_backward, Backend, Checkpoint, ConditionalModel, Probs, Trainable,
    CHECKPOINT_FORMAT,
};
use crate::space::{SequenceState, Vocab};

/// Upper bound on the number of logits a tabular model may allocate.
const MAX_LOGITS: usize = 50_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel {
    vocab: Vocab,
    d: usize,
    logits: Vec<f64>,
}

impl TabularModel {
    /// All-zero logits: every masked row is uniform.
    pub fn zeros(vocab: Vocab, d: usize) -> Result<Self> {
        let size = Self::param_count(vocab, d)?;
        Ok(Self {
            vocab,
            d,
            logits: vec![0.0; size],
        })
    }

    pub fn from_params(vocab: Vocab, d: usize, logits: Vec<f64>) -> Result<Self> {
        let size = Self::param_count(vocab, d)?;
        if logits.len() != size {
            return Err(RaddError::Shape(format!(
                "tabular model needs {size} logits, got {}",
                logits.len()
            )));
        }
        Ok(Self { vocab, d, logits })
    }

    pub fn param_count(vocab: Vocab, d: usize) -> Result<usize> {
        if d == 0 {
            return Err(RaddError::Shape("d must be at least 1".into()));
        }
        let contexts = (0..d).try_fold(1usize, |acc, _| acc.checked_mul(vocab.n_tokens() + 1));
        contexts
            .and_then(|c| c.checked_mul(d * vocab.n_tokens()))
            .filter(|&n| n <= MAX_LOGITS)
            .ok_or_else(|| {
                RaddError::TooLarge(format!("tabular model for N={}, d={d}", vocab.n_tokens()))
            })
    }

    fn context_index(&self, x: &SequenceState) -> usize {
        let base = self.vocab.n_tokens() + 1;
        x.tokens().iter().fold(0, |acc, &t| acc * base + t as usize)
    }

    fn offset(&self, context: usize, position: usize) -> usize {
        (context * self.d + position) * self.vocab.n_tokens()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            backend: Backend::Tabular,
            vocab: self.vocab.n_tokens(),
            d: self.d,
            arch: None,
            params: self.logits.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.backend != Backend::Tabular {
            return Err(RaddError::Incompatible(format!(
                "expected a tabular checkpoint, found {:?}",
                ck.backend
            )));
        }
        Self::from_params(Vocab::new(ck.vocab)?, ck.d, ck.params)
    }
}

impl ConditionalModel for TabularModel {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn seq_len(&self) -> usize {
        self.d
    }

    fn backend(&self) -> Backend {
        Backend::Tabular
    }

    fn predict(&self, x: &SequenceState) -> Result<Probs> {
        Ok(self.forward(x)?.0)
    }
}

impl Trainable for TabularModel {
    /// Context index and the masked rows' probabilities.
    type Tape = (usize, Probs);

    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn forward(&self, x: &SequenceState) -> Result<(Probs, Self::Tape)> {
        self.check_input(x)?;
        let n = self.vocab.n_tokens();
        let context = self.context_index(x);
        let mut probs = Probs::zeros(self.d, n);
        for i in x.masked_positions(self.vocab) {
            let off = self.offset(context, i);
            let row = probs.row_mut(i);
            row.copy_from_slice(&self.logits[off..off + n]);
            softmax(row);
        }
        probs.fill_unmasked_one_hot(x, self.vocab);
        Ok((probs.clone(), (context, probs)))
    }

    fn backward(&self, tape: &Self::Tape, upstream: &Probs, grad: &mut [f64]) {
        let (context, probs) = tape;
        let n = self.vocab.n_tokens();
        let mut rest = *context;
        // Walk the context digits from the last position back; unmasked rows carry no parameters.
        for i in (0..self.d).rev() {
            let token = rest % (n + 1);
            rest /= n + 1;
            if token != n {
                continue;
            }
            let off = self.offset(*context, i);
            softmax_backward(probs.row(i), upstream.row(i), &mut grad[off..off + n]);
        }
    }
}
