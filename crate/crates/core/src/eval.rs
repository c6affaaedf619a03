//! Likelihood-based evaluation and sample diagnostics.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, RaddError, Result};
use crate::forward::ForwardKernel;
use crate::losses::{entropy_residual, exact_loss, mc_loss, LossKind};
use crate::model::ConditionalModel;
use crate::rng::substream;
use crate::sampler::{sample_many, SampleReport, SamplerSpec};
use crate::space::{total_variation, ExactJointTable, SequenceState};

/// How per-example losses are computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum Estimator {
    /// Mean of `draws` Monte-Carlo samples per example; example `i`, draw `k` uses substream `(seed, i, k)`.
    Mc { draws: usize, seed: u64 },
    /// Enumeration over all `2^d` masks.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NfeSummary {
    pub mean: f64,
    pub std: f64,
    pub trajectories: usize,
}

impl From<&SampleReport> for NfeSummary {
    fn from(r: &SampleReport) -> Self {
        Self {
            mean: r.nfe_mean(),
            std: r.nfe_std(),
            trajectories: r.nfe.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: LossKind,
    pub estimator: Estimator,
    pub loss_nats_per_token: f64,
    pub perplexity: f64,
    /// Standard error of `loss_nats_per_token`; 0 for exact estimates of a single example.
    pub standard_error: f64,
    pub examples: usize,
    /// Examples dropped because the model gave a target token probability 0.
    pub excluded: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tv_distance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unigram_entropy_nats: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nfe_summary: Option<NfeSummary>,
}

pub const EVAL_CSV_HEADER: &str =
    "loss,estimator,loss_nats_per_token,perplexity,standard_error,examples,excluded,tv_distance,unigram_entropy_nats";

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let est = match self.estimator {
            Estimator::Exact => "exact".to_string(),
            Estimator::Mc { draws, .. } => format!("mc{draws}"),
        };
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.loss,
            est,
            self.loss_nats_per_token,
            self.perplexity,
            self.standard_error,
            self.examples,
            self.excluded,
            opt(self.tv_distance),
            opt(self.unigram_entropy_nats)
        )
    }

    /// Appends one row to a results CSV, writing the header if the file is new.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        if fresh {
            writeln!(f, "{EVAL_CSV_HEADER}")?;
        }
        writeln!(f, "{}", self.csv_line())?;
        Ok(())
    }
}

/// Exact per-sequence value that every loss kind is compared on.
///
/// The t-DCE integral misses `d h(lambda(T))` relative to DSE; adding it back makes
/// all four kinds estimate the same bound.
fn exact_bound(
    kind: LossKind,
    model: &dyn ConditionalModel,
    x0: &SequenceState,
    kernel: &ForwardKernel,
) -> Result<f64> {
    let v = exact_loss(kind, model, x0, kernel)?;
    Ok(match kind {
        LossKind::Tdce => v + x0.len() as f64 * entropy_residual(kernel.schedule.lambda_max()),
        _ => v,
    })
}

/// One example's value and the squared-error contribution of its MC draws.
fn example_loss(
    kind: LossKind,
    model: &dyn ConditionalModel,
    x0: &SequenceState,
    index: usize,
    kernel: &ForwardKernel,
    estimator: Estimator,
) -> Result<(f64, f64)> {
    match estimator {
        Estimator::Exact => Ok((exact_bound(kind, model, x0, kernel)?, 0.0)),
        Estimator::Mc { draws, seed } => {
            let values: Vec<f64> = (0..draws)
                .map(|k| {
                    let mut rng = substream(seed, index as u64, k as u64);
                    let mut v = mc_loss(kind, model, x0, kernel, &mut rng)?.value;
                    if kind == LossKind::Tdce {
                        v += x0.len() as f64 * entropy_residual(kernel.schedule.lambda_max());
                    }
                    Ok(v)
                })
                .collect::<Result<_>>()?;
            let mean = values.iter().sum::<f64>() / draws as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            Ok((mean, var))
        }
    }
}

/// Mean per-token loss of `model` on `dataset` and its exponential.
pub fn perplexity(
    model: &dyn ConditionalModel,
    dataset: &[SequenceState],
    kernel: &ForwardKernel,
    loss: LossKind,
    estimator: Estimator,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return domain("cannot evaluate on an empty dataset");
    }
    if let Estimator::Mc { draws: 0, .. } = estimator {
        return domain("the Monte-Carlo estimator needs at least one draw");
    }
    let d = model.seq_len() as f64;
    let results: Vec<Result<(f64, f64)>> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, x0)| example_loss(loss, model, x0, i, kernel, estimator))
        .collect();
    let mut values = Vec::with_capacity(dataset.len());
    let mut within = 0.0;
    let mut excluded = 0;
    for r in results {
        match r {
            Ok((v, sq)) => {
                values.push(v);
                within += sq;
            }
            Err(RaddError::InfiniteLoss { .. }) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(RaddError::Domain("every example had infinite loss".into()));
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    // Standard error of the mean over all individual draws (or over examples when exact).
    let standard_error = match estimator {
        Estimator::Mc { draws, .. } => {
            let total = m * draws as f64;
            let between: f64 =
                values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * draws as f64;
            if total > 1.0 {
                ((within + between) / (total - 1.0) / total).sqrt()
            } else {
                0.0
            }
        }
        Estimator::Exact if values.len() > 1 => {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt()
        }
        Estimator::Exact => 0.0,
    };
    let per_token = mean / d;
    Ok(EvalReport {
        loss,
        estimator,
        loss_nats_per_token: per_token,
        perplexity: per_token.exp(),
        standard_error: standard_error / d,
        examples: values.len(),
        excluded,
        tv_distance: None,
        unigram_entropy_nats: None,
        nfe_summary: None,
    })
}

/// Exact expected per-token loss under `p0` (a weighted sum over every state) and its perplexity.
pub fn perplexity_under_table(
    model: &dyn ConditionalModel,
    p0: &ExactJointTable,
    kernel: &ForwardKernel,
    loss: LossKind,
) -> Result<EvalReport> {
    let mut total = 0.0;
    for (x, p) in p0.states() {
        if p > 0.0 {
            total += p * exact_bound(loss, model, &x, kernel)?;
        }
    }
    let per_token = total / p0.d() as f64;
    Ok(EvalReport {
        loss,
        estimator: Estimator::Exact,
        loss_nats_per_token: per_token,
        perplexity: per_token.exp(),
        standard_error: 0.0,
        examples: p0.n_states(),
        excluded: 0,
        tv_distance: None,
        unigram_entropy_nats: None,
        nfe_summary: None,
    })
}

/// Empirical distribution of `sequences` over the states of `p0`.
pub fn empirical_distribution(
    p0: &ExactJointTable,
    sequences: &[SequenceState],
) -> Result<Vec<f64>> {
    let mut counts = vec![0.0; p0.n_states()];
    for s in sequences {
        counts[p0.index_of(s)?] += 1.0;
    }
    let n = sequences.len().max(1) as f64;
    Ok(counts.into_iter().map(|c| c / n).collect())
}

/// Total variation between `trials` generated sequences and `p0`.
pub fn distribution_distance(
    model: &dyn ConditionalModel,
    spec: &SamplerSpec<'_>,
    p0: &ExactJointTable,
    trials: usize,
    seed: u64,
) -> Result<(f64, SampleReport)> {
    if model.seq_len() != p0.d() || model.vocab() != p0.vocab() {
        return Err(RaddError::Incompatible(
            "model and table disagree on (N, d)".into(),
        ));
    }
    let report = sample_many(model, spec, trials, seed)?;
    let empirical = empirical_distribution(p0, &report.sequences)?;
    Ok((total_variation(&empirical, p0.probs()), report))
}

/// Entropy (nats) of the pooled token frequencies of `samples`.
pub fn unigram_entropy(samples: &[SequenceState]) -> Result<f64> {
    let mut counts = std::collections::BTreeMap::new();
    let mut total = 0usize;
    for s in samples {
        for &t in s.tokens() {
            *counts.entry(t).or_insert(0usize) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return domain("unigram entropy of an empty sample set");
    }
    let n = total as f64;
    Ok(-counts
        .values()
        .map(|&c| c as f64 / n)
        .map(|p| p * p.ln())
        .sum::<f64>())
}
