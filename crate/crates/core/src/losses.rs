//! The four training objectives: Monte-Carlo estimators and exact evaluators.
//!
//! Every estimator follows the same shape: draw the noise (a time, a masking
//! probability, or an order and a cut), build the partially masked input, run the
//! model once, and score the masked positions against `x0`. A prediction of exactly
//! zero at a target token is reported as [`RaddError::InfiniteLoss`], never clamped.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RaddError, Result};
use crate::forward::{mask_with_prob, ForwardKernel};
use crate::model::{check_finite, ConditionalModel, Probs, Trainable};
use crate::quadrature::{integrate_gl, integrate_tanh_sinh};
use crate::space::{SequenceState, Vocab};

/// Largest `d` the exact evaluators will enumerate `2^d` masks for.
pub const MAX_EXACT_D: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dse,
    Tdce,
    Ldce,
    Ao,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Dse, LossKind::Tdce, LossKind::Ldce, LossKind::Ao];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dse => "dse",
            LossKind::Tdce => "tdce",
            LossKind::Ldce => "ldce",
            LossKind::Ao => "ao",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = RaddError;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                RaddError::Domain(format!(
                    "unknown loss '{s}' (expected dse, tdce, ldce or ao)"
                ))
            })
    }
}

/// One Monte-Carlo loss draw.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSample {
    /// Nats.
    pub value: f64,
    /// `d value / d params`, when requested.
    pub grad: Option<Vec<f64>>,
    /// The drawn `t` (dse, tdce), `lambda` (ldce) or cut `l` (ao).
    pub draw: f64,
    pub masked: usize,
}

/// `K(a) = a log a - a`, with `K(0) = 0`.
pub fn k_const(a: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * a.ln() - a
    }
}

/// Binary entropy `h(lambda)` in nats; the finite-horizon gap between DSE and t-DCE is `d h(lambda(T))`.
pub fn entropy_residual(lambda: f64) -> f64 {
    let xlogx = |x: f64| if x <= 0.0 { 0.0 } else { x * x.ln() };
    -(xlogx(lambda) + xlogx(1.0 - lambda))
}

/// How a drawn input is scored.
#[derive(Debug, Clone, Copy)]
enum Scoring {
    /// `T sigma sum_j [w c_ij - 1{j=y} w log(w c_ij) + K(1{j=y} w)]`, `scale = T sigma`.
    Dse { scale: f64, w: f64 },
    /// `-T sigma w log(w c_iy)`, `scale = T sigma w`.
    Tdce { scale: f64, w: f64 },
    /// `-coef log c_iy`.
    CrossEntropy { coef: f64 },
}

struct Draw {
    x: SequenceState,
    value: f64,
    scoring: Scoring,
}

fn draw_input<R: Rng + ?Sized>(
    kind: LossKind,
    kernel: &ForwardKernel,
    x0: &SequenceState,
    rng: &mut R,
) -> Result<Draw> {
    let vocab = kernel.vocab;
    if x0.masked_count(vocab) > 0 {
        return Err(RaddError::Domain(
            "loss targets must be clean sequences".into(),
        ));
    }
    match kind {
        LossKind::Dse | LossKind::Tdce => {
            let horizon = kernel.schedule.horizon();
            let t = horizon * nonzero_unit(rng);
            let x = kernel.sample_forward(x0, t, rng)?;
            let sigma = kernel.schedule.sigma(t);
            let w = kernel.schedule.score_scalar(t);
            let scoring = if kind == LossKind::Dse {
                Scoring::Dse {
                    scale: horizon * sigma,
                    w,
                }
            } else {
                Scoring::Tdce {
                    scale: horizon * sigma * w,
                    w,
                }
            };
            Ok(Draw {
                x,
                value: t,
                scoring,
            })
        }
        LossKind::Ldce => {
            let lambda = nonzero_unit(rng);
            let x = mask_with_prob(x0, lambda, vocab, rng);
            Ok(Draw {
                x,
                value: lambda,
                scoring: Scoring::CrossEntropy { coef: 1.0 / lambda },
            })
        }
        LossKind::Ao => {
            let d = x0.len();
            let mut order: Vec<usize> = (0..d).collect();
            order.shuffle(rng);
            let l = rng.gen_range(1..=d);
            let mut x = x0.clone();
            for &i in &order[l - 1..] {
                x.set(i, vocab.mask_id());
            }
            let coef = d as f64 / (d - l + 1) as f64;
            Ok(Draw {
                x,
                value: l as f64,
                scoring: Scoring::CrossEntropy { coef },
            })
        }
    }
}

/// Uniform on `(0, 1)`: an exact zero is redrawn.
fn nonzero_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

/// Scores `probs` (the model output at `draw.x`) against `x0`; optionally fills `dL/dprobs`.
fn score(
    draw: &Draw,
    x0: &SequenceState,
    probs: &Probs,
    vocab: Vocab,
    mut upstream: Option<&mut Probs>,
) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut masked = 0;
    for i in draw.x.masked_positions(vocab) {
        masked += 1;
        let y = x0.get(i) as usize;
        let c = probs.get(i, y);
        if c <= 0.0 {
            return Err(RaddError::InfiniteLoss {
                position: i,
                token: y,
            });
        }
        match draw.scoring {
            Scoring::Dse { scale, w } => {
                let row_sum: f64 = probs.row(i).iter().sum();
                total += scale * (w * row_sum - w * (w * c).ln() + k_const(w));
                if let Some(g) = upstream.as_deref_mut() {
                    let row = g.row_mut(i);
                    row.iter_mut().for_each(|v| *v = scale * w);
                    row[y] -= scale * w / c;
                }
            }
            Scoring::Tdce { scale, w } => {
                total -= scale * (w * c).ln();
                if let Some(g) = upstream.as_deref_mut() {
                    g.row_mut(i)[y] = -scale / c;
                }
            }
            Scoring::CrossEntropy { coef } => {
                total -= coef * c.ln();
                if let Some(g) = upstream.as_deref_mut() {
                    g.row_mut(i)[y] = -coef / c;
                }
            }
        }
    }
    if !total.is_finite() {
        return Err(RaddError::NonFinite {
            index: 0,
            what: "loss value".into(),
        });
    }
    Ok((total, masked))
}

/// One draw of `kind` on `x0`, value only.
pub fn mc_loss<R: Rng + ?Sized>(
    kind: LossKind,
    model: &dyn ConditionalModel,
    x0: &SequenceState,
    kernel: &ForwardKernel,
    rng: &mut R,
) -> Result<LossSample> {
    model.check_input(x0)?;
    let draw = draw_input(kind, kernel, x0, rng)?;
    let probs = model.predict(&draw.x)?;
    let (value, masked) = score(&draw, x0, &probs, kernel.vocab, None)?;
    Ok(LossSample {
        value,
        grad: None,
        draw: draw.value,
        masked,
    })
}

/// One draw of `kind` on `x0` with its parameter gradient added into `grad`.
///
/// The gradient buffer is left untouched when an error is returned.
pub fn mc_loss_grad_into<M: Trainable, R: Rng + ?Sized>(
    kind: LossKind,
    model: &M,
    x0: &SequenceState,
    kernel: &ForwardKernel,
    rng: &mut R,
    grad: &mut [f64],
) -> Result<LossSample> {
    model.check_input(x0)?;
    let draw = draw_input(kind, kernel, x0, rng)?;
    let (probs, tape) = model.forward(&draw.x)?;
    let mut upstream = Probs::zeros(probs.d(), probs.n());
    let (value, masked) = score(&draw, x0, &probs, kernel.vocab, Some(&mut upstream))?;
    if masked > 0 {
        let mut local = vec![0.0; grad.len()];
        model.backward(&tape, &upstream, &mut local);
        check_finite(&local, "loss gradient")?;
        grad.iter_mut().zip(&local).for_each(|(g, l)| *g += l);
    }
    Ok(LossSample {
        value,
        grad: None,
        draw: draw.value,
        masked,
    })
}

/// One draw of `kind` on `x0` with its parameter gradient.
pub fn mc_loss_grad<M: Trainable, R: Rng + ?Sized>(
    kind: LossKind,
    model: &M,
    x0: &SequenceState,
    kernel: &ForwardKernel,
    rng: &mut R,
) -> Result<LossSample> {
    let mut grad = vec![0.0; model.num_params()];
    let mut sample = mc_loss_grad_into(kind, model, x0, kernel, rng, &mut grad)?;
    sample.grad = Some(grad);
    Ok(sample)
}

/// Denoising score entropy draw: `t ~ U(0, T)`, `x_t` from the forward process.
pub fn mc_loss_dse<R: Rng + ?Sized>(
    model: &dyn ConditionalModel,
    x0: &SequenceState,
    kernel: &ForwardKernel,
    rng: &mut R,
) -> Result<LossSample> {
    mc_loss(LossKind::Dse, model, x0, kernel, rng)
}

/// Time-parameterized denoising cross-entropy draw.
pub fn mc_loss_tdce<R: Rng + ?Sized>(
    model: &dyn ConditionalModel,
    x0: &SequenceState,
    kernel: &ForwardKernel,
    rng: &mut R,
) -> Result<LossSample> {
    mc_loss(LossKind::Tdce, model, x0, kernel, rng)
}

/// Mask-probability-parameterized denoising cross-entropy draw: `lambda ~ U(0, 1)`.
pub fn mc_loss_ldce<R: Rng + ?Sized>(
    model: &dyn ConditionalModel,
    x0: &SequenceState,
    rng: &mut R,
) -> Result<LossSample> {
    mc_loss(LossKind::Ldce, model, x0, &cross_entropy_kernel(model), rng)
}

/// Any-order autoregressive draw: random order, random cut `l`, weight `d / (d - l + 1)`.
pub fn mc_loss_ao<R: Rng + ?Sized>(
    model: &dyn ConditionalModel,
    x0: &SequenceState,
    rng: &mut R,
) -> Result<LossSample> {
    mc_loss(LossKind::Ao, model, x0, &cross_entropy_kernel(model), rng)
}

/// The schedule is irrelevant to ldce and ao; only the vocabulary is read.
fn cross_entropy_kernel(model: &dyn ConditionalModel) -> ForwardKernel {
    ForwardKernel::new(Default::default(), model.vocab())
}

/// Per-mask sums over all `2^d` masking patterns of `x0`.
struct MaskTable {
    d: usize,
    /// `sum_{i masked} -log q(x0^i | unmasked)`, indexed by bitmask.
    nll: Vec<f64>,
    /// `sum_{i masked} sum_j c_ij` (the row mass the DSE integrand reads).
    row_mass: Vec<f64>,
}

impl MaskTable {
    fn build(model: &dyn ConditionalModel, x0: &SequenceState) -> Result<Self> {
        model.check_input(x0)?;
        let vocab = model.vocab();
        let d = x0.len();
        if d > MAX_EXACT_D {
            return Err(RaddError::TooLarge(format!(
                "exact losses enumerate 2^d masks; d = {d} > {MAX_EXACT_D}"
            )));
        }
        if x0.masked_count(vocab) > 0 {
            return Err(RaddError::Domain(
                "loss targets must be clean sequences".into(),
            ));
        }
        let count = 1usize << d;
        let mut nll = vec![0.0; count];
        let mut row_mass = vec![0.0; count];
        for bits in 1..count {
            let x = x0.with_mask_bits(bits as u64, vocab);
            let probs = model.predict(&x)?;
            for i in (0..d).filter(|i| bits >> i & 1 == 1) {
                let y = x0.get(i) as usize;
                let c = probs.get(i, y);
                if c <= 0.0 {
                    return Err(RaddError::InfiniteLoss {
                        position: i,
                        token: y,
                    });
                }
                nll[bits] -= c.ln();
                row_mass[bits] += probs.row(i).iter().sum::<f64>();
            }
        }
        Ok(Self { d, nll, row_mass })
    }

    /// `A_k = sum_{|mask| = k} nll(mask)` for `k = 0..=d`.
    fn nll_by_count(&self) -> Vec<f64> {
        let mut by_k = vec![0.0; self.d + 1];
        for (bits, v) in self.nll.iter().enumerate() {
            by_k[bits.count_ones() as usize] += v;
        }
        by_k
    }

    fn mass_by_count(&self) -> Vec<f64> {
        let mut by_k = vec![0.0; self.d + 1];
        for (bits, v) in self.row_mass.iter().enumerate() {
            by_k[bits.count_ones() as usize] += v;
        }
        by_k
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// Exact any-order autoregressive loss of `x0` by enumerating every masking pattern:
/// `sum_k 1 / (k C(d, k)) sum_{|mask| = k} sum_{i masked} -log q(x0^i | unmasked)`.
pub fn exact_loss_ao(model: &dyn ConditionalModel, x0: &SequenceState) -> Result<f64> {
    let table = MaskTable::build(model, x0)?;
    let d = table.d;
    Ok(table
        .nll_by_count()
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, a)| a / (k as f64 * binomial(d, k)))
        .sum())
}

/// `lambda`-DCE integrand `sum_k A_k lambda^{k-1} (1 - lambda)^{d-k}`, a polynomial of degree `d - 1`.
fn ldce_integrand(by_k: &[f64], lambda: f64) -> f64 {
    let d = by_k.len() - 1;
    (1..=d)
        .map(|k| by_k[k] * lambda.powi(k as i32 - 1) * (1.0 - lambda).powi((d - k) as i32))
        .sum()
}

/// Exact `lambda`-DCE restricted to `lambda in [0, upper]` by `nodes`-point Gauss–Legendre.
///
/// Exact to round-off once `nodes >= ceil(d / 2)`.
pub fn exact_loss_ldce_upto(
    model: &dyn ConditionalModel,
    x0: &SequenceState,
    upper: f64,
    nodes: usize,
) -> Result<f64> {
    if nodes == 0 {
        return Err(RaddError::Domain(
            "quadrature needs at least one node".into(),
        ));
    }
    if !(0.0..=1.0).contains(&upper) {
        return Err(RaddError::Domain(format!(
            "upper limit {upper} outside [0, 1]"
        )));
    }
    let by_k = MaskTable::build(model, x0)?.nll_by_count();
    Ok(integrate_gl(
        |l| ldce_integrand(&by_k, l),
        0.0,
        upper,
        nodes,
    ))
}

/// Which integral [`exact_loss_quadrature`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuadratureKind {
    Tdce,
    Ldce,
    Dse,
}

/// Relative tolerance for the time-domain integrals.
const TIME_TOL: f64 = 1e-15;

/// Exact expected loss of `x0` by quadrature.
///
/// `Ldce` integrates the polynomial `lambda`-integrand over `[0, 1]` with `nodes`-point
/// Gauss–Legendre. `Tdce` and `Dse` integrate the time-domain integrands over
/// `[0, T]` exactly as the Monte-Carlo estimators define them, with the
/// expectation over masks done by enumeration. Those integrands carry a `log t`
/// singularity at `t = 0`, so they use adaptive tanh-sinh instead and ignore `nodes`.
pub fn exact_loss_quadrature(
    model: &dyn ConditionalModel,
    x0: &SequenceState,
    kernel: &ForwardKernel,
    which: QuadratureKind,
    nodes: usize,
) -> Result<f64> {
    if which == QuadratureKind::Ldce {
        return exact_loss_ldce_upto(model, x0, 1.0, nodes);
    }
    let table = MaskTable::build(model, x0)?;
    let d = table.d;
    let nll = table.nll_by_count();
    let mass = table.mass_by_count();
    let schedule = kernel.schedule;
    let integrand = |t: f64| -> f64 {
        let (lambda, keep) = (schedule.lambda(t), schedule.keep_prob(t));
        if lambda <= 0.0 {
            return 0.0;
        }
        let sigma = schedule.sigma(t);
        // lambda^k w = lambda^(k-1) keep keeps every factor finite down to subnormal t.
        let log_w = keep.ln() - lambda.ln();
        let mut total = 0.0;
        for k in 1..=d {
            let weight = lambda.powi(k as i32 - 1) * keep.powi((d - k + 1) as i32);
            let n_masks = binomial(d, k);
            let kf = k as f64;
            let cross = nll[k] - n_masks * kf * log_w;
            let inner = match which {
                QuadratureKind::Tdce => cross,
                // w R + w (S - k log w) + k K(w), with K(w) / w = log w - 1.
                _ => mass[k] + cross + n_masks * kf * (log_w - 1.0),
            };
            total += weight * inner;
        }
        sigma * total
    };
    let value = integrate_tanh_sinh(integrand, 0.0, schedule.horizon(), TIME_TOL);
    if !value.is_finite() {
        return Err(RaddError::NonFinite {
            index: 0,
            what: "loss quadrature".into(),
        });
    }
    Ok(value)
}

/// Exact expectation of the `kind` Monte-Carlo estimator on `x0`.
pub fn exact_loss(
    kind: LossKind,
    model: &dyn ConditionalModel,
    x0: &SequenceState,
    kernel: &ForwardKernel,
) -> Result<f64> {
    let nodes = x0.len().div_ceil(2).max(1);
    match kind {
        LossKind::Ao => exact_loss_ao(model, x0),
        LossKind::Ldce => exact_loss_quadrature(model, x0, kernel, QuadratureKind::Ldce, nodes),
        LossKind::Tdce => exact_loss_quadrature(model, x0, kernel, QuadratureKind::Tdce, nodes),
        LossKind::Dse => exact_loss_quadrature(model, x0, kernel, QuadratureKind::Dse, nodes),
    }
}
