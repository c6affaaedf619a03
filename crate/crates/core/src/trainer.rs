//! Adam training of a [`Trainable`] model against any of the four losses.
//!
//! Each step draws a batch, evaluates one Monte-Carlo loss sample per example on
//! its own RNG substream `(seed, step, example)`, averages the gradients in example
//! order, clips by global norm, and takes an Adam step. Per-example work may run
//! on several threads; the result is bitwise identical either way.

use std::io::Write;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::shuffled;
use crate::error::{domain, RaddError, Result};
use crate::forward::ForwardKernel;
use crate::losses::{exact_loss_ao, mc_loss_grad_into, LossKind};
use crate::model::{check_finite, Trainable};
use crate::rng::substream;
use crate::space::{ExactJointTable, SequenceState, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

/// Training hyperparameters. Defaults suit the tabular backend; neural runs
/// usually want `lr = 1e-3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    #[serde(default = "default_clip")]
    pub grad_clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    /// Metrics row every `log_every` steps (and at the last step).
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Exact probe every `probe_every` steps; 0 disables it.
    #[serde(default = "default_probe_every")]
    pub probe_every: usize,
    /// Off makes the metrics file a pure function of config and seed.
    #[serde(default = "default_true")]
    pub record_wallclock: bool,
}

fn default_loss() -> LossKind {
    LossKind::Ldce
}

fn default_steps() -> usize {
    1000
}

fn default_batch() -> usize {
    64
}

fn default_lr() -> f64 {
    1e-2
}

fn default_ema() -> f64 {
    0.999
}

fn default_clip() -> f64 {
    1.0
}

fn default_log_every() -> usize {
    10
}

fn default_probe_every() -> usize {
    100
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: default_loss(),
            steps: default_steps(),
            batch: default_batch(),
            lr: default_lr(),
            adam: AdamConfig::default(),
            ema_decay: default_ema(),
            grad_clip_norm: default_clip(),
            seed: 0,
            log_every: default_log_every(),
            probe_every: default_probe_every(),
            record_wallclock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if self.batch == 0 || self.log_every == 0 {
            return domain("batch and log_every must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return domain(format!("lr must be positive, got {}", self.lr));
        }
        if !(open_unit(self.adam.beta1) && open_unit(self.adam.beta2)) {
            return domain("adam betas must lie in (0, 1)");
        }
        if !(self.adam.eps > 0.0) {
            return domain("adam eps must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return domain(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            ));
        }
        if !(self.grad_clip_norm > 0.0) {
            return domain("grad_clip_norm must be positive");
        }
        Ok(())
    }
}

/// Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts before anything changes.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    adam: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(RaddError::Shape(
            "params, grads and optimizer state differ in length".into(),
        ));
    }
    check_finite(grads, "gradient")?;
    state.t += 1;
    let c1 = 1.0 - adam.beta1.powi(state.t as i32);
    let c2 = 1.0 - adam.beta2.powi(state.t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = adam.beta1 * *m + (1.0 - adam.beta1) * g;
        *v = adam.beta2 * *v + (1.0 - adam.beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + adam.eps);
    }
    Ok(())
}

/// Exponential moving average of parameters, reported with zero-start bias removed.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    decay: f64,
    shadow: Vec<f64>,
    updates: u64,
}

impl Ema {
    pub fn new(n: usize, decay: f64) -> Self {
        Self {
            decay,
            shadow: vec![0.0; n],
            updates: 0,
        }
    }

    pub fn update(&mut self, params: &[f64]) {
        self.updates += 1;
        for (s, &p) in self.shadow.iter_mut().zip(params) {
            *s = self.decay * *s + (1.0 - self.decay) * p;
        }
    }

    /// Debiased average; `None` before the first update.
    pub fn value(&self) -> Option<Vec<f64>> {
        if self.updates == 0 {
            return None;
        }
        let correction = 1.0 - self.decay.powi(self.updates.min(i32::MAX as u64) as i32);
        Some(self.shadow.iter().map(|s| s / correction).collect())
    }
}

/// Where training sequences come from.
pub trait DataSource {
    fn vocab(&self) -> Vocab;

    fn seq_len(&self) -> usize;

    /// Clean sequences for `step`. Called once per step, in step order.
    fn next_batch(&mut self, step: usize, batch: usize) -> Vec<SequenceState>;
}

/// i.i.d. draws from an explicit joint table.
#[derive(Debug, Clone)]
pub struct TableSource {
    table: ExactJointTable,
    seed: u64,
}

impl TableSource {
    pub fn new(table: ExactJointTable, seed: u64) -> Self {
        Self { table, seed }
    }
}

impl DataSource for TableSource {
    fn vocab(&self) -> Vocab {
        self.table.vocab()
    }

    fn seq_len(&self) -> usize {
        self.table.d()
    }

    fn next_batch(&mut self, step: usize, batch: usize) -> Vec<SequenceState> {
        let mut rng = substream(self.seed, step as u64, u64::MAX);
        (0..batch).map(|_| self.table.sample(&mut rng)).collect()
    }
}

/// Epoch-shuffled passes over a fixed set of blocks.
#[derive(Debug, Clone)]
pub struct CorpusSource {
    blocks: Vec<SequenceState>,
    vocab: Vocab,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl CorpusSource {
    pub fn new(blocks: Vec<SequenceState>, vocab: Vocab, seed: u64) -> Result<Self> {
        if blocks.is_empty() {
            return Err(RaddError::EmptyCorpus("no training blocks".into()));
        }
        let d = blocks[0].len();
        if blocks.iter().any(|b| b.len() != d) {
            return Err(RaddError::Shape("training blocks differ in length".into()));
        }
        let order = shuffled(&(0..blocks.len()).collect::<Vec<_>>(), seed, 0);
        Ok(Self {
            blocks,
            vocab,
            seed,
            epoch: 0,
            order,
            cursor: 0,
        })
    }
}

impl DataSource for CorpusSource {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn seq_len(&self) -> usize {
        self.blocks[0].len()
    }

    fn next_batch(&mut self, _step: usize, batch: usize) -> Vec<SequenceState> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.cursor = 0;
                self.order = shuffled(
                    &(0..self.blocks.len()).collect::<Vec<_>>(),
                    self.seed,
                    self.epoch,
                );
            }
            out.push(self.blocks[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        out
    }
}

/// What the periodic exact loss is measured on.
#[derive(Debug, Clone)]
pub enum Probe {
    /// Mean exact AO loss over these sequences.
    Sequences(Vec<SequenceState>),
    /// Expected exact AO loss under the table (equals its entropy for the true conditionals).
    Table(ExactJointTable),
}

impl Probe {
    pub fn evaluate<M: Trainable>(&self, model: &M) -> Result<f64> {
        match self {
            Probe::Sequences(seqs) => {
                let losses: Vec<f64> = seqs
                    .iter()
                    .map(|x| exact_loss_ao(model, x))
                    .collect::<Result<_>>()?;
                Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
            }
            Probe::Table(table) => {
                let mut total = 0.0;
                for (x, p) in table.states() {
                    if p > 0.0 {
                        total += p * exact_loss_ao(model, &x)?;
                    }
                }
                Ok(total)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss_mc: f64,
    pub loss_exact_probe: Option<f64>,
    pub grad_norm: f64,
    pub wallclock_ms: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,loss_mc,loss_exact_probe,grad_norm,wallclock_ms";

impl MetricRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.step,
            self.loss_mc,
            opt(self.loss_exact_probe),
            self.grad_norm,
            opt(self.wallclock_ms)
        )
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// The EMA parameters when `ema_decay > 0`, else the raw ones.
    pub model: M,
    /// Parameters after the last optimizer step.
    pub raw: M,
    pub metrics: Vec<MetricRow>,
    pub initial_loss: f64,
    pub final_probe: Option<f64>,
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 100;

/// Runs `cfg.steps` optimizer steps. `on_row` sees each metrics row as it is produced.
pub fn train<M: Trainable, D: DataSource>(
    model: M,
    data: &mut D,
    kernel: &ForwardKernel,
    cfg: &TrainConfig,
    probe: Option<&Probe>,
    mut on_row: impl FnMut(&MetricRow),
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    if data.seq_len() != model.seq_len() || data.vocab() != model.vocab() {
        return Err(RaddError::Incompatible(
            "data source and model disagree on (N, d)".into(),
        ));
    }
    let mut model = model;
    let n_params = model.num_params();
    let mut adam = AdamState::new(n_params);
    let mut ema = Ema::new(n_params, cfg.ema_decay);
    let mut metrics = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut above = 0usize;
    let mut final_probe = None;
    let started = Instant::now();

    for step in 0..cfg.steps {
        let batch = data.next_batch(step, cfg.batch);
        let current = &model;
        let per_example: Vec<Result<(f64, Vec<f64>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(b, x0)| {
                let mut rng = substream(cfg.seed, step as u64, b as u64);
                let mut grad = vec![0.0; n_params];
                let sample = mc_loss_grad_into(cfg.loss, current, x0, kernel, &mut rng, &mut grad)?;
                Ok((sample.value, grad))
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; n_params];
        for result in per_example {
            let (value, g) = result?;
            loss += value;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let scale = 1.0 / batch.len() as f64;
        loss *= scale;
        grad.iter_mut().for_each(|g| *g *= scale);
        check_finite(&grad, "gradient")?;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm > cfg.grad_clip_norm {
            let shrink = cfg.grad_clip_norm / grad_norm;
            grad.iter_mut().for_each(|g| *g *= shrink);
        }
        adam_step(model.params_mut(), &grad, &mut adam, cfg.lr, &cfg.adam)?;
        if cfg.ema_decay > 0.0 {
            ema.update(model.params());
        }

        if step == 0 {
            initial_loss = loss;
        }
        above = if loss > DIVERGENCE_FACTOR * initial_loss.abs() && initial_loss.abs() > 0.0 {
            above + 1
        } else {
            0
        };
        if above >= DIVERGENCE_PATIENCE {
            return Err(RaddError::Diverged {
                step,
                loss,
                initial: initial_loss,
            });
        }

        let last = step + 1 == cfg.steps;
        if step % cfg.log_every == 0 || last {
            let probe_now =
                probe.is_some() && cfg.probe_every > 0 && (step % cfg.probe_every == 0 || last);
            let loss_exact_probe = if probe_now {
                let evaluated = effective_model(&model, &ema, cfg);
                let v = probe.unwrap().evaluate(&evaluated)?;
                if last {
                    final_probe = Some(v);
                }
                Some(v)
            } else {
                None
            };
            let wallclock_ms = cfg
                .record_wallclock
                .then(|| started.elapsed().as_secs_f64() * 1e3);
            let row = MetricRow {
                step,
                loss_mc: loss,
                loss_exact_probe,
                grad_norm,
                wallclock_ms,
            };
            on_row(&row);
            metrics.push(row);
        }
    }
    let final_model = effective_model(&model, &ema, cfg);
    Ok(TrainOutcome {
        model: final_model,
        raw: model,
        metrics,
        initial_loss,
        final_probe,
    })
}

fn effective_model<M: Trainable>(model: &M, ema: &Ema, cfg: &TrainConfig) -> M {
    let mut out = model.clone();
    if cfg.ema_decay > 0.0 {
        if let Some(avg) = ema.value() {
            out.params_mut().copy_from_slice(&avg);
        }
    }
    out
}

/// Random parameter jitter, e.g. to break symmetry in tests.
pub fn jitter<M: Trainable>(model: &mut M, scale: f64, seed: u64) {
    let mut rng = substream(seed, 0, 0x717);
    model
        .params_mut()
        .iter_mut()
        .for_each(|p| *p += scale * rng.gen_range(-1.0..1.0));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TabularModel;
    use crate::schedule::NoiseSchedule;

    #[test]
    fn first_adam_step_is_signed_lr() {
        let mut params = vec![0.0, 1.0, -2.0, 5.0];
        let grads = vec![0.3, -4.0, 1e-3, 0.0];
        let mut state = AdamState::new(4);
        adam_step(
            &mut params,
            &grads,
            &mut state,
            0.01,
            &AdamConfig::default(),
        )
        .unwrap();
        let expect = [-0.01, 1.01, -2.01, 5.0];
        for (p, e) in params.iter().zip(expect) {
            assert!((p - e).abs() < 1e-7, "{p} vs {e}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![0.5, -0.25];
        let mut state = AdamState::new(2);
        for _ in 0..3 {
            adam_step(
                &mut params,
                &[0.0, 0.0],
                &mut state,
                0.1,
                &AdamConfig::default(),
            )
            .unwrap();
        }
        assert_eq!(params, vec![0.5, -0.25]);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut params = vec![1.0, 2.0];
        let mut state = AdamState::new(2);
        let err = adam_step(
            &mut params,
            &[0.1, f64::INFINITY],
            &mut state,
            0.1,
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, RaddError::NonFinite { index: 1, .. }));
        assert_eq!(params, vec![1.0, 2.0]);
        assert_eq!(state.steps(), 0);
    }

    #[test]
    fn ema_is_debiased() {
        let mut ema = Ema::new(1, 0.99);
        assert!(ema.value().is_none());
        ema.update(&[3.0]);
        assert!((ema.value().unwrap()[0] - 3.0).abs() < 1e-12);
        ema.update(&[3.0]);
        assert!((ema.value().unwrap()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert!(serde_json::from_str::<TrainConfig>("{\"lr\": 0.1, \"bogus\": 1}").is_err());
        let bad = TrainConfig {
            ema_decay: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            adam: AdamConfig {
                beta1: 1.0,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn point_mass_is_memorized() {
        let vocab = Vocab::new(2).unwrap();
        let x = SequenceState::new(vec![1, 0, 1]);
        let table = ExactJointTable::point_mass(vocab, &x).unwrap();
        let model = TabularModel::zeros(vocab, 3).unwrap();
        let kernel = ForwardKernel::new(NoiseSchedule::default(), vocab);
        let cfg = TrainConfig {
            steps: 2000,
            batch: 8,
            lr: 0.1,
            ema_decay: 0.0,
            probe_every: 0,
            ..TrainConfig::default()
        };
        let out = train(
            model,
            &mut TableSource::new(table, 1),
            &kernel,
            &cfg,
            None,
            |_| {},
        )
        .unwrap();
        let v = exact_loss_ao(&out.model, &x).unwrap();
        assert!(v < 1e-3, "{v}");
    }

    #[test]
    fn corpus_source_cycles_through_epochs() {
        let blocks: Vec<SequenceState> = (0..5).map(|i| SequenceState::new(vec![i, i])).collect();
        let mut src = CorpusSource::new(blocks, Vocab::new(8).unwrap(), 2).unwrap();
        let first: Vec<_> = src.next_batch(0, 5);
        let mut seen: Vec<u32> = first.iter().map(|b| b.get(0)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(src.next_batch(1, 7).len(), 7);
    }

    #[test]
    fn metrics_csv_blanks_missing_fields() {
        let row = MetricRow {
            step: 3,
            loss_mc: 1.5,
            loss_exact_probe: None,
            grad_norm: 0.25,
            wallclock_ms: None,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&[row], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            format!("{METRICS_HEADER}\n3,1.5,,0.25,\n")
        );
    }
}
