//! The time-independent conditional model.
//!
//! A model maps a partially masked sequence to a `d x N` matrix whose row `i`
//! approximates `p0(. | x^UM)` at every masked position `i`. There is no time
//! input anywhere in this interface: the time dependence of the concrete score
//! lives entirely in [`crate::schedule::NoiseSchedule::score_scalar`].
//!
//! Rows at unmasked positions are the one-hot of the observed token.

mod neural;
mod oracle;
mod tabular;

use serde::{Deserialize, Serialize};

pub use neural::{NeuralConfig, NeuralModel};
pub use oracle::{OracleModel, UniformModel};
pub use tabular::TabularModel;

use crate::error::{RaddError, Result};
use crate::space::{SequenceState, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Oracle,
    Uniform,
    Tabular,
    Neural,
}

/// Row-major `d x N` matrix of per-position token probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Probs {
    d: usize,
    n: usize,
    data: Vec<f64>,
}

impl Probs {
    pub fn zeros(d: usize, n: usize) -> Self {
        Self {
            d,
            n,
            data: vec![0.0; d * n],
        }
    }

    pub fn from_vec(d: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != d * n {
            return Err(RaddError::Shape(format!(
                "{} entries for a {d} x {n} matrix",
                data.len()
            )));
        }
        Ok(Self { d, n, data })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Writes the one-hot convention into rows at unmasked positions of `x`.
    pub(crate) fn fill_unmasked_one_hot(&mut self, x: &SequenceState, vocab: Vocab) {
        for (i, &tok) in x.tokens().iter().enumerate() {
            if tok != vocab.mask_id() {
                let row = self.row_mut(i);
                row.iter_mut().for_each(|v| *v = 0.0);
                row[tok as usize] = 1.0;
            }
        }
    }
}

pub trait ConditionalModel: Send + Sync {
    fn vocab(&self) -> Vocab;

    fn seq_len(&self) -> usize;

    fn backend(&self) -> Backend;

    /// Conditional token probabilities for every position of `x`.
    fn predict(&self, x: &SequenceState) -> Result<Probs>;

    /// Shape check shared by every backend.
    fn check_input(&self, x: &SequenceState) -> Result<()> {
        if x.len() != self.seq_len() {
            return Err(RaddError::Shape(format!(
                "model expects length {}, got {}",
                self.seq_len(),
                x.len()
            )));
        }
        x.validate(self.vocab())
    }
}

/// A model with a flat parameter vector and hand-written gradients.
pub trait Trainable: ConditionalModel + Clone {
    /// Whatever the forward pass must keep for the backward pass.
    type Tape: Send;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn forward(&self, x: &SequenceState) -> Result<(Probs, Self::Tape)>;

    /// Accumulates `dL/dparams` into `grad` given `upstream = dL/dprobs`.
    ///
    /// Only rows at masked positions of the forward input are read.
    fn backward(&self, tape: &Self::Tape, upstream: &Probs, grad: &mut [f64]);
}

/// Gradient of a loss that depends on `predict(x)` through `upstream = dL/dprobs`.
///
/// Fails with the offending parameter index when any entry is non-finite.
pub fn loss_gradient<M: Trainable>(
    model: &M,
    x: &SequenceState,
    upstream: &Probs,
) -> Result<Vec<f64>> {
    let (_, tape) = model.forward(x)?;
    let mut grad = vec![0.0; model.num_params()];
    model.backward(&tape, upstream, &mut grad);
    check_finite(&grad, "gradient")?;
    Ok(grad)
}

pub(crate) fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(RaddError::NonFinite {
            index,
            what: what.to_string(),
        }),
        None => Ok(()),
    }
}

/// In-place softmax.
pub(crate) fn softmax(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Pulls `dL/dprobs` back through a softmax: `p * (g - <p, g>)`, added into `out`.
pub(crate) fn softmax_backward(probs: &[f64], upstream: &[f64], out: &mut [f64]) {
    let dot: f64 = probs.iter().zip(upstream).map(|(p, g)| p * g).sum();
    for ((o, p), g) in out.iter_mut().zip(probs).zip(upstream) {
        *o += p * (g - dot);
    }
}

pub const CHECKPOINT_FORMAT: u32 = 1;

/// On-disk checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: u32,
    pub backend: Backend,
    pub vocab: usize,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<NeuralConfig>,
    pub params: Vec<f64>,
}

/// A trainable model of either backend, as loaded from a checkpoint.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Tabular(TabularModel),
    Neural(NeuralModel),
}

impl AnyModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            AnyModel::Tabular(m) => m.to_checkpoint(),
            AnyModel::Neural(m) => m.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(RaddError::Incompatible(format!(
                "unsupported checkpoint format {}",
                ck.format
            )));
        }
        match ck.backend {
            Backend::Tabular => Ok(AnyModel::Tabular(TabularModel::from_checkpoint(ck)?)),
            Backend::Neural => Ok(AnyModel::Neural(NeuralModel::from_checkpoint(ck)?)),
            other => Err(RaddError::Incompatible(format!(
                "backend {other:?} has no parameters to load"
            ))),
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn as_model(&self) -> &dyn ConditionalModel {
        match self {
            AnyModel::Tabular(m) => m,
            AnyModel::Neural(m) => m,
        }
    }
}

impl ConditionalModel for AnyModel {
    fn vocab(&self) -> Vocab {
        self.as_model().vocab()
    }

    fn seq_len(&self) -> usize {
        self.as_model().seq_len()
    }

    fn backend(&self) -> Backend {
        self.as_model().backend()
    }

    fn predict(&self, x: &SequenceState) -> Result<Probs> {
        self.as_model().predict(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_backward_of_cross_entropy_is_p_minus_onehot() {
        let mut p = vec![0.3, -1.0, 2.0];
        softmax(&mut p);
        let target = 2;
        let upstream: Vec<f64> = (0..3)
            .map(|j| if j == target { -1.0 / p[j] } else { 0.0 })
            .collect();
        let mut dz = vec![0.0; 3];
        softmax_backward(&p, &upstream, &mut dz);
        for j in 0..3 {
            let expect = p[j] - if j == target { 1.0 } else { 0.0 };
            assert!((dz[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_reports_index() {
        let err = check_finite(&[0.0, 1.0, f64::NAN], "gradient").unwrap_err();
        assert!(matches!(err, RaddError::NonFinite { index: 2, .. }));
    }
}
