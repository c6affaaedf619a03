use crate::error::Result;
use crate::model::{Backend, ConditionalModel, Probs};
use crate::space::{ExactJointTable, SequenceState, Vocab};

/// Exact conditionals read off a joint table.
#[derive(Debug, Clone)]
pub struct OracleModel {
    table: ExactJointTable,
}

impl OracleModel {
    pub fn new(table: ExactJointTable) -> Self {
        Self { table }
    }

    pub fn table(&self) -> &ExactJointTable {
        &self.table
    }
}

impl ConditionalModel for OracleModel {
    fn vocab(&self) -> Vocab {
        self.table.vocab()
    }

    fn seq_len(&self) -> usize {
        self.table.d()
    }

    fn backend(&self) -> Backend {
        Backend::Oracle
    }

    fn predict(&self, x: &SequenceState) -> Result<Probs> {
        self.check_input(x)?;
        Probs::from_vec(
            self.table.d(),
            self.table.vocab().n_tokens(),
            self.table.conditional_of(x)?,
        )
    }
}

/// Predicts `1/N` for every masked position.
#[derive(Debug, Clone, Copy)]
pub struct UniformModel {
    vocab: Vocab,
    d: usize,
}

impl UniformModel {
    pub fn new(vocab: Vocab, d: usize) -> Self {
        Self { vocab, d }
    }
}

impl ConditionalModel for UniformModel {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn seq_len(&self) -> usize {
        self.d
    }

    fn backend(&self) -> Backend {
        Backend::Uniform
    }

    fn predict(&self, x: &SequenceState) -> Result<Probs> {
        self.check_input(x)?;
        let n = self.vocab.n_tokens();
        let mut probs = Probs::from_vec(self.d, n, vec![1.0 / n as f64; self.d * n])?;
        probs.fill_unmasked_one_hot(x, self.vocab);
        Ok(probs)
    }
}
