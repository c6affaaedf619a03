//! Reverse-process sampling.
//!
//! A reverse step from `t` to `s` unmasks each masked position independently with
//! probability `psi(t, s)` and draws its token from the model's prediction at `x_t`.
//! Because the model ignores time, its output only changes when the sequence does,
//! so with caching the model runs once per step that actually unmasks something.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, RaddError, Result};
use crate::forward::ForwardKernel;
use crate::model::{ConditionalModel, Probs};
use crate::rng::substream;
use crate::schedule::NoiseSchedule;
use crate::space::{SequenceState, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMethod {
    Tweedie,
    Euler,
    /// Any-order autoregressive: one position per model call.
    Ao,
}

impl SamplingMethod {
    pub fn name(self) -> &'static str {
        match self {
            SamplingMethod::Tweedie => "tweedie",
            SamplingMethod::Euler => "euler",
            SamplingMethod::Ao => "ao",
        }
    }
}

impl fmt::Display for SamplingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplingMethod {
    type Err = RaddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tweedie" => Ok(SamplingMethod::Tweedie),
            "euler" => Ok(SamplingMethod::Euler),
            "ao" => Ok(SamplingMethod::Ao),
            other => domain(format!(
                "unknown sampling method '{other}' (expected tweedie, euler or ao)"
            )),
        }
    }
}

/// Time grid `0 = t_0 < t_1 < ... < t_n = T`, walked from `t_n` down.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrid {
    times: Vec<f64>,
}

impl StepGrid {
    /// `t_k = k T / n`.
    pub fn uniform(n: usize, horizon: f64) -> Result<Self> {
        if n == 0 {
            return domain("a step grid needs at least one step");
        }
        let mut times: Vec<f64> = (0..=n).map(|k| horizon * k as f64 / n as f64).collect();
        times[n] = horizon;
        Ok(Self { times })
    }

    /// From increasing times; the first must be 0 and the last `horizon`.
    pub fn from_times(times: Vec<f64>, horizon: f64) -> Result<Self> {
        if times.len() < 2 {
            return domain("a step grid needs at least two times");
        }
        if times[0] != 0.0 || *times.last().unwrap() != horizon {
            return domain(format!("grid must run from 0 to {horizon}"));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return domain("grid times must be strictly increasing");
        }
        Ok(Self { times })
    }

    /// Number of steps `n`.
    pub fn n(&self) -> usize {
        self.times.len() - 1
    }

    /// `t_k`.
    pub fn t(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

/// `psi(t, s)` before clamping. Euler can exceed 1 on coarse grids.
pub fn unmask_prob_raw(
    schedule: &NoiseSchedule,
    method: SamplingMethod,
    s: f64,
    t: f64,
) -> Result<f64> {
    if !(0.0 <= s && s < t && t <= schedule.horizon()) {
        return domain(format!(
            "need 0 <= s < t <= {}, got s={s}, t={t}",
            schedule.horizon()
        ));
    }
    let lam_t = schedule.lambda(t);
    match method {
        SamplingMethod::Tweedie => Ok((schedule.keep_prob(s) - schedule.keep_prob(t)) / lam_t),
        SamplingMethod::Euler => Ok(schedule.sigma(t) * schedule.keep_prob(t) / lam_t * (t - s)),
        SamplingMethod::Ao => domain("psi is defined for the diffusion samplers only"),
    }
}

/// `psi(t, s)` clamped into `[0, 1]`; the flag records whether clamping changed it.
pub fn unmask_prob(
    kernel: &ForwardKernel,
    method: SamplingMethod,
    s: f64,
    t: f64,
) -> Result<(f64, bool)> {
    let raw = unmask_prob_raw(&kernel.schedule, method, s, t)?;
    let psi = raw.clamp(0.0, 1.0);
    Ok((psi, psi != raw))
}

/// Inverse-CDF draw from a probability row.
fn draw_token<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> u32 {
    let u: f64 = rng.gen::<f64>() * row.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = j;
            if u < acc {
                return j as u32;
            }
        }
    }
    last as u32
}

/// Memoized predictions at the current state.
struct PredictionCache<'a> {
    model: &'a dyn ConditionalModel,
    enabled: bool,
    state: Option<SequenceState>,
    probs: Option<Probs>,
    calls: usize,
}

impl<'a> PredictionCache<'a> {
    fn new(model: &'a dyn ConditionalModel, enabled: bool) -> Self {
        Self {
            model,
            enabled,
            state: None,
            probs: None,
            calls: 0,
        }
    }

    fn get(&mut self, x: &SequenceState) -> Result<&Probs> {
        let hit = self.enabled && self.state.as_ref() == Some(x);
        if !hit {
            self.probs = Some(self.model.predict(x)?);
            self.state = Some(x.clone());
            self.calls += 1;
        }
        Ok(self.probs.as_ref().unwrap())
    }
}

/// One step on `x`: Bernoulli decisions for every masked position left to right,
/// then token draws for the chosen ones left to right. Returns how many unmasked.
fn step_in_place<R: Rng + ?Sized>(
    x: &mut SequenceState,
    psi: f64,
    vocab: Vocab,
    cache: &mut PredictionCache<'_>,
    rng: &mut R,
) -> Result<usize> {
    let masked: Vec<usize> = x.masked_positions(vocab).collect();
    if masked.is_empty() {
        return Ok(0);
    }
    let chosen: Vec<usize> = masked
        .into_iter()
        .filter(|_| rng.gen::<f64>() < psi)
        .collect();
    // Without the cache the model runs on every step that still has masks.
    let eager = if cache.enabled {
        None
    } else {
        Some(cache.get(x)?.clone())
    };
    if chosen.is_empty() {
        return Ok(0);
    }
    let probs = match eager {
        Some(p) => p,
        None => cache.get(x)?.clone(),
    };
    for &i in &chosen {
        x.set(i, draw_token(probs.row(i), rng));
    }
    Ok(chosen.len())
}

/// One reverse step `x_t -> x_s` with a fresh model call.
pub fn reverse_step<R: Rng + ?Sized>(
    model: &dyn ConditionalModel,
    x_t: &SequenceState,
    kernel: &ForwardKernel,
    method: SamplingMethod,
    s: f64,
    t: f64,
    rng: &mut R,
) -> Result<SequenceState> {
    model.check_input(x_t)?;
    let (psi, _) = unmask_prob(kernel, method, s, t)?;
    let mut x = x_t.clone();
    let mut cache = PredictionCache::new(model, true);
    step_in_place(&mut x, psi, kernel.vocab, &mut cache, rng)?;
    Ok(x)
}

/// Fixed tokens for conditional sampling.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub positions: Vec<usize>,
    pub tokens: Vec<u32>,
}

impl Prompt {
    fn initial_state(&self, vocab: Vocab, d: usize) -> Result<SequenceState> {
        if self.positions.len() != self.tokens.len() {
            return Err(RaddError::Shape(
                "prompt positions and tokens differ in length".into(),
            ));
        }
        let mut x = SequenceState::all_masked(vocab, d);
        for (&i, &tok) in self.positions.iter().zip(&self.tokens) {
            if i >= d {
                return domain(format!(
                    "prompt position {i} outside sequence of length {d}"
                ));
            }
            if tok >= vocab.mask_id() {
                return domain("prompt tokens must be data tokens");
            }
            if x.get(i) != vocab.mask_id() {
                return domain(format!("prompt position {i} given twice"));
            }
            x.set(i, tok);
        }
        Ok(x)
    }
}

/// One generated sequence with its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sequence: SequenceState,
    pub nfe: usize,
    /// Masks survived the last step and were filled from the final prediction.
    pub forced_fill: bool,
    /// Steps whose Euler `psi` had to be clamped into `[0, 1]`.
    pub clamp_events: usize,
}

/// Samples one sequence by walking `grid` from `T` to 0.
#[allow(clippy::too_many_arguments)]
pub fn sample<R: Rng + ?Sized>(
    model: &dyn ConditionalModel,
    kernel: &ForwardKernel,
    grid: &StepGrid,
    method: SamplingMethod,
    cache: bool,
    prompt: Option<&Prompt>,
    rng: &mut R,
) -> Result<Trajectory> {
    if method == SamplingMethod::Ao {
        let order_prompt = prompt.cloned().unwrap_or_default();
        return ao_sample_prompted(model, None, &order_prompt, rng);
    }
    if *grid.times().last().unwrap() != kernel.schedule.horizon() {
        return domain("grid must end at the schedule horizon");
    }
    let vocab = kernel.vocab;
    let d = model.seq_len();
    let mut x = prompt
        .cloned()
        .unwrap_or_default()
        .initial_state(vocab, d)?;
    model.check_input(&x)?;
    let mut memo = PredictionCache::new(model, cache);
    let mut clamp_events = 0;
    for k in (1..=grid.n()).rev() {
        let (psi, clamped) = unmask_prob(kernel, method, grid.t(k - 1), grid.t(k))?;
        clamp_events += clamped as usize;
        step_in_place(&mut x, psi, vocab, &mut memo, rng)?;
    }
    let residual: Vec<usize> = x.masked_positions(vocab).collect();
    let forced_fill = !residual.is_empty();
    if forced_fill {
        let probs = memo.get(&x)?.clone();
        for i in residual {
            x.set(i, draw_token(probs.row(i), rng));
        }
    }
    Ok(Trajectory {
        sequence: x,
        nfe: memo.calls,
        forced_fill,
        clamp_events,
    })
}

/// Any-order autoregressive sampling: one position per model call, in `order`
/// (a uniformly random permutation when absent).
pub fn ao_sample<R: Rng + ?Sized>(
    model: &dyn ConditionalModel,
    order: Option<&[usize]>,
    rng: &mut R,
) -> Result<Trajectory> {
    ao_sample_prompted(model, order, &Prompt::default(), rng)
}

fn ao_sample_prompted<R: Rng + ?Sized>(
    model: &dyn ConditionalModel,
    order: Option<&[usize]>,
    prompt: &Prompt,
    rng: &mut R,
) -> Result<Trajectory> {
    let vocab = model.vocab();
    let d = model.seq_len();
    let mut x = prompt.initial_state(vocab, d)?;
    let order: Vec<usize> = match order {
        Some(order) => {
            let mut seen = vec![false; d];
            if order.len() != d
                || order
                    .iter()
                    .any(|&i| i >= d || std::mem::replace(&mut seen[i], true))
            {
                return domain("order must be a permutation of 0..d");
            }
            order.to_vec()
        }
        None => {
            let mut order: Vec<usize> = (0..d).collect();
            order.shuffle(rng);
            order
        }
    };
    let mut nfe = 0;
    for i in order {
        if !x.is_masked(i, vocab) {
            continue;
        }
        let probs = model.predict(&x)?;
        nfe += 1;
        x.set(i, draw_token(probs.row(i), rng));
    }
    Ok(Trajectory {
        sequence: x,
        nfe,
        forced_fill: false,
        clamp_events: 0,
    })
}

/// A batch of independently seeded trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleReport {
    pub sequences: Vec<SequenceState>,
    pub nfe: Vec<usize>,
    pub method: SamplingMethod,
    pub cache: bool,
    pub seed: u64,
    pub forced_fills: usize,
    pub clamp_events: usize,
}

impl SampleReport {
    pub fn nfe_mean(&self) -> f64 {
        self.nfe.iter().sum::<usize>() as f64 / self.nfe.len().max(1) as f64
    }

    /// Sample standard deviation of the per-trajectory NFE.
    pub fn nfe_std(&self) -> f64 {
        let n = self.nfe.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.nfe_mean();
        (self
            .nfe
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64)
            .sqrt()
    }

    /// JSON lines: `{"tokens": [...]}`, plus `"text"` for byte vocabularies.
    pub fn write_jsonl<W: Write>(&self, vocab: Vocab, mut out: W) -> Result<()> {
        for seq in &self.sequences {
            let mut line = serde_json::json!({ "tokens": seq.tokens() });
            if vocab == Vocab::bytes() {
                line["text"] = serde_json::Value::String(decode_bytes(seq));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Lossy UTF-8 decoding of a byte sequence; masks become `_`.
pub fn decode_bytes(seq: &SequenceState) -> String {
    let bytes: Vec<u8> = seq
        .tokens()
        .iter()
        .map(|&t| if t < 256 { t as u8 } else { b'_' })
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Sampler settings shared by every trajectory of a batch.
#[derive(Debug, Clone)]
pub struct SamplerSpec<'a> {
    pub kernel: ForwardKernel,
    pub grid: StepGrid,
    pub method: SamplingMethod,
    pub cache: bool,
    pub prompt: Option<&'a Prompt>,
}

/// `trajectories` samples; trajectory `k` uses RNG substream `(seed, k)`, so the
/// result does not depend on how the work is scheduled across threads.
pub fn sample_many(
    model: &dyn ConditionalModel,
    spec: &SamplerSpec<'_>,
    trajectories: usize,
    seed: u64,
) -> Result<SampleReport> {
    let runs: Vec<Result<Trajectory>> = (0..trajectories)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(seed, k as u64, 0);
            sample(
                model,
                &spec.kernel,
                &spec.grid,
                spec.method,
                spec.cache,
                spec.prompt,
                &mut rng,
            )
        })
        .collect();
    let mut report = SampleReport {
        sequences: Vec::with_capacity(trajectories),
        nfe: Vec::with_capacity(trajectories),
        method: spec.method,
        cache: spec.cache,
        seed,
        forced_fills: 0,
        clamp_events: 0,
    };
    for run in runs {
        let run = run?;
        report.sequences.push(run.sequence);
        report.nfe.push(run.nfe);
        report.forced_fills += run.forced_fill as usize;
        report.clamp_events += run.clamp_events;
    }
    Ok(report)
}

/// Expected number of model calls of cached sampling of `l` masked positions:
/// `sum_k 1 - (1 - r_k)^l`, where `r_k` is the chance one position unmasks at step `k`.
pub fn enfe_analytic(
    kernel: &ForwardKernel,
    grid: &StepGrid,
    method: SamplingMethod,
    l: usize,
) -> Result<f64> {
    let schedule = &kernel.schedule;
    let n = grid.n();
    let r: Vec<f64> = match method {
        SamplingMethod::Tweedie => {
            let top = schedule.lambda(grid.t(n));
            (1..=n)
                .map(|k| (schedule.keep_prob(grid.t(k - 1)) - schedule.keep_prob(grid.t(k))) / top)
                .collect()
        }
        SamplingMethod::Euler => {
            let mut r = vec![0.0; n + 1];
            // Probability a position is still masked when step k starts.
            let mut alive = 1.0;
            for k in (1..=n).rev() {
                let (psi, _) = unmask_prob(kernel, method, grid.t(k - 1), grid.t(k))?;
                r[k] = alive * psi;
                alive *= 1.0 - psi;
            }
            r.split_off(1)
        }
        SamplingMethod::Ao => return Ok(l as f64),
    };
    Ok(r.iter().map(|rk| 1.0 - (1.0 - rk).powi(l as i32)).sum())
}

/// Expected model calls without the cache: every step that starts with a mask present.
pub fn enfe_uncached(
    kernel: &ForwardKernel,
    grid: &StepGrid,
    method: SamplingMethod,
    l: usize,
) -> Result<f64> {
    let schedule = &kernel.schedule;
    let n = grid.n();
    let alive: Vec<f64> = match method {
        SamplingMethod::Tweedie => {
            let top = schedule.lambda(grid.t(n));
            (1..=n).map(|k| schedule.lambda(grid.t(k)) / top).collect()
        }
        SamplingMethod::Euler => {
            let mut alive = vec![0.0; n];
            let mut a = 1.0;
            for k in (1..=n).rev() {
                alive[k - 1] = a;
                a *= 1.0 - unmask_prob(kernel, method, grid.t(k - 1), grid.t(k))?.0;
            }
            alive
        }
        SamplingMethod::Ao => return Ok(l as f64),
    };
    Ok(alive.iter().map(|q| 1.0 - (1.0 - q).powi(l as i32)).sum())
}

/// One row of the NFE statistics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct NfeRow {
    pub n: usize,
    pub l: usize,
    pub method: SamplingMethod,
    pub cache: bool,
    pub enfe_analytic: f64,
    pub nfe_mean: f64,
    pub nfe_std: f64,
    pub trajectories: usize,
}

pub const NFE_CSV_HEADER: &str = "n,l,method,cache,enfe_analytic,nfe_mean,nfe_std,trajectories";

pub fn write_nfe_csv<W: Write>(rows: &[NfeRow], mut out: W) -> Result<()> {
    writeln!(out, "{NFE_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.n,
            r.l,
            r.method,
            if r.cache { "on" } else { "off" },
            r.enfe_analytic,
            r.nfe_mean,
            r.nfe_std,
            r.trajectories
        )?;
    }
    Ok(())
}
