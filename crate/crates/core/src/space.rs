//! Token spaces and the brute-force joint distribution oracle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RaddError, Result};

/// Largest state space an [`ExactJointTable`] may enumerate.
pub const MAX_TABLE_STATES: usize = 10_000_000;

/// `N` data tokens `0..N`; the mask token is `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    n_tokens: usize,
}

impl Vocab {
    pub fn new(n_tokens: usize) -> Result<Self> {
        if n_tokens == 0 || n_tokens >= u32::MAX as usize {
            return Err(RaddError::Domain(format!(
                "vocabulary size {n_tokens} out of range"
            )));
        }
        Ok(Self { n_tokens })
    }

    /// Byte vocabulary, mask id 256.
    pub fn bytes() -> Self {
        Self { n_tokens: 256 }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn mask_id(&self) -> u32 {
        self.n_tokens as u32
    }
}

/// A fixed-length sequence over data tokens and the mask token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SequenceState {
    tokens: Vec<u32>,
}

impl SequenceState {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self { tokens }
    }

    pub fn all_masked(vocab: Vocab, d: usize) -> Self {
        Self {
            tokens: vec![vocab.mask_id(); d],
        }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, i: usize) -> u32 {
        self.tokens[i]
    }

    pub fn set(&mut self, i: usize, token: u32) {
        self.tokens[i] = token;
    }

    pub fn is_masked(&self, i: usize, vocab: Vocab) -> bool {
        self.tokens[i] == vocab.mask_id()
    }

    pub fn masked_count(&self, vocab: Vocab) -> usize {
        self.tokens
            .iter()
            .filter(|&&t| t == vocab.mask_id())
            .count()
    }

    pub fn masked_positions(&self, vocab: Vocab) -> impl Iterator<Item = usize> + '_ {
        let m = vocab.mask_id();
        self.tokens
            .iter()
            .enumerate()
            .filter(move |(_, &t)| t == m)
            .map(|(i, _)| i)
    }

    /// Checks `d >= 1` and every entry in `[0, N]`.
    pub fn validate(&self, vocab: Vocab) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(RaddError::Shape(
                "sequence must have at least one position".into(),
            ));
        }
        if let Some((i, &t)) = self
            .tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t > vocab.mask_id())
        {
            return Err(RaddError::Domain(format!(
                "token {t} at position {i} exceeds mask id {}",
                vocab.mask_id()
            )));
        }
        Ok(())
    }

    /// Copy of `self` with the positions whose bit is set in `mask_bits` masked.
    pub fn with_mask_bits(&self, mask_bits: u64, vocab: Vocab) -> Self {
        let tokens = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                if mask_bits >> i & 1 == 1 {
                    vocab.mask_id()
                } else {
                    t
                }
            })
            .collect();
        Self { tokens }
    }
}

impl From<Vec<u32>> for SequenceState {
    fn from(tokens: Vec<u32>) -> Self {
        Self::new(tokens)
    }
}

/// Explicit probability table over all `N^d` clean sequences.
///
/// Index convention: position 0 is the most significant digit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableFile", into = "TableFile")]
pub struct ExactJointTable {
    vocab: Vocab,
    d: usize,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    n_tokens: usize,
    d: usize,
    probs: Vec<f64>,
}

impl TryFrom<TableFile> for ExactJointTable {
    type Error = RaddError;

    fn try_from(f: TableFile) -> Result<Self> {
        ExactJointTable::new(Vocab::new(f.n_tokens)?, f.d, f.probs)
    }
}

impl From<ExactJointTable> for TableFile {
    fn from(t: ExactJointTable) -> Self {
        TableFile {
            n_tokens: t.vocab.n_tokens(),
            d: t.d,
            probs: t.probs,
        }
    }
}

/// Neumaier-compensated sum; tables can hold millions of tiny entries.
pub(crate) fn compensated_sum(values: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + comp
}

pub(crate) fn state_count(vocab: Vocab, d: usize) -> Result<usize> {
    let mut total: usize = 1;
    for _ in 0..d {
        total = total
            .checked_mul(vocab.n_tokens())
            .filter(|&n| n <= MAX_TABLE_STATES)
            .ok_or_else(|| {
                RaddError::TooLarge(format!(
                    "N^d exceeds {MAX_TABLE_STATES} (N={}, d={d})",
                    vocab.n_tokens()
                ))
            })?;
    }
    Ok(total)
}

impl ExactJointTable {
    pub fn new(vocab: Vocab, d: usize, probs: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(RaddError::Shape("d must be at least 1".into()));
        }
        let n_states = state_count(vocab, d)?;
        if probs.len() != n_states {
            return Err(RaddError::Shape(format!(
                "expected {n_states} probabilities, got {}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(RaddError::Domain(format!("invalid probability {p}")));
        }
        let total = compensated_sum(&probs);
        if (total - 1.0).abs() > 1e-12 {
            return Err(RaddError::Domain(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self { vocab, d, probs })
    }

    /// Normalizes nonnegative weights into a table.
    pub fn from_weights(vocab: Vocab, d: usize, weights: Vec<f64>) -> Result<Self> {
        let total = compensated_sum(&weights);
        if !(total > 0.0 && total.is_finite()) {
            return Err(RaddError::Domain(
                "weights must have positive finite sum".into(),
            ));
        }
        Self::new(vocab, d, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(vocab: Vocab, d: usize) -> Result<Self> {
        let n = state_count(vocab, d)?;
        Self::new(vocab, d, vec![1.0 / n as f64; n])
    }

    pub fn point_mass(vocab: Vocab, x: &SequenceState) -> Result<Self> {
        let d = x.len();
        let n = state_count(vocab, d)?;
        let mut probs = vec![0.0; n];
        probs[Self::encode(vocab, x)?] = 1.0;
        Self::new(vocab, d, probs)
    }

    /// Random table with i.i.d. `Exp(1)^(1/concentration)` weights.
    ///
    /// Small `concentration` gives peaked tables; `1.0` gives flat Dirichlet(1) draws.
    pub fn random<R: Rng + ?Sized>(
        vocab: Vocab,
        d: usize,
        concentration: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n = state_count(vocab, d)?;
        let weights = (0..n)
            .map(|_| {
                let e = -(1.0 - rng.gen::<f64>()).ln();
                e.powf(1.0 / concentration)
            })
            .collect();
        Self::from_weights(vocab, d, weights)
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    fn encode(vocab: Vocab, x: &SequenceState) -> Result<usize> {
        let n = vocab.n_tokens();
        x.tokens().iter().try_fold(0usize, |acc, &t| {
            if (t as usize) < n {
                Ok(acc * n + t as usize)
            } else {
                Err(RaddError::Domain(format!("token {t} is not a data token")))
            }
        })
    }

    pub fn index_of(&self, x: &SequenceState) -> Result<usize> {
        if x.len() != self.d {
            return Err(RaddError::Shape(format!(
                "sequence length {} != table length {}",
                x.len(),
                self.d
            )));
        }
        Self::encode(self.vocab, x)
    }

    pub fn decode(&self, mut index: usize) -> SequenceState {
        let n = self.vocab.n_tokens();
        let mut tokens = vec![0u32; self.d];
        for slot in tokens.iter_mut().rev() {
            *slot = (index % n) as u32;
            index /= n;
        }
        SequenceState::new(tokens)
    }

    /// Probability of a clean sequence.
    pub fn prob(&self, x: &SequenceState) -> Result<f64> {
        Ok(self.probs[self.index_of(x)?])
    }

    /// Iterates `(state, probability)` over every clean sequence.
    pub fn states(&self) -> impl Iterator<Item = (SequenceState, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .map(move |(i, &p)| (self.decode(i), p))
    }

    fn check_context(&self, context: &SequenceState) -> Result<()> {
        if context.len() != self.d {
            return Err(RaddError::Shape(format!(
                "context length {} != table length {}",
                context.len(),
                self.d
            )));
        }
        context.validate(self.vocab)
    }

    /// Calls `f(state_tokens, p)` for every clean state consistent with the
    /// unmasked entries of `context`.
    fn for_each_consistent(&self, context: &SequenceState, mut f: impl FnMut(&[u32], f64)) {
        let n = self.vocab.n_tokens() as u32;
        let mask = self.vocab.mask_id();
        let ctx = context.tokens();
        let mut digits = vec![0u32; self.d];
        for &p in &self.probs {
            if ctx.iter().zip(&digits).all(|(&c, &x)| c == mask || c == x) {
                f(&digits, p);
            }
            for slot in digits.iter_mut().rev() {
                *slot += 1;
                if *slot < n {
                    break;
                }
                *slot = 0;
            }
        }
    }

    /// Marginal probability `p0(x^UM)` of the unmasked part of `context`.
    ///
    /// The all-masked context has marginal 1.
    pub fn marginal_unmasked(&self, context: &SequenceState) -> Result<f64> {
        self.check_context(context)?;
        let mut total = 0.0;
        self.for_each_consistent(context, |_, p| total += p);
        Ok(total)
    }

    /// Exact per-position conditionals `p0(. | x^UM)` as a row-major `d x N` matrix.
    ///
    /// Rows at unmasked positions are the one-hot of the observed token.
    pub fn conditional_of(&self, context: &SequenceState) -> Result<Vec<f64>> {
        self.check_context(context)?;
        let n = self.vocab.n_tokens();
        let mask = self.vocab.mask_id();
        let ctx = context.tokens();
        let mut rows = vec![0.0; self.d * n];
        let mut total = 0.0;
        self.for_each_consistent(context, |digits, p| {
            total += p;
            for (i, (&c, &x)) in ctx.iter().zip(digits).enumerate() {
                if c == mask {
                    rows[i * n + x as usize] += p;
                }
            }
        });
        if total <= 0.0 {
            return Err(RaddError::DegenerateContext);
        }
        for (i, &c) in ctx.iter().enumerate() {
            let row = &mut rows[i * n..(i + 1) * n];
            if c == mask {
                row.iter_mut().for_each(|v| *v /= total);
            } else {
                row[c as usize] = 1.0;
            }
        }
        Ok(rows)
    }

    /// Draws one clean sequence by inverse-CDF lookup (one uniform per draw).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SequenceState {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = i;
                acc += p;
                if u < acc {
                    return self.decode(i);
                }
            }
        }
        self.decode(last_positive)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Total variation distance between two probability vectors of equal length.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
