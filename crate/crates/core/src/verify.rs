//! Self-contained identity checks on tiny enumerable instances.
//!
//! Every closed form in the crate is compared against a brute-force computation:
//! transition probabilities against a matrix exponential of the absorbing
//! generator, marginals and conditionals against sums over all clean sequences,
//! and the loss and sampler identities against enumeration.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::forward::ForwardKernel;
use crate::losses::{
    entropy_residual, exact_loss_ao, exact_loss_ldce_upto, exact_loss_quadrature, mc_loss,
    mc_loss_grad, LossKind, QuadratureKind,
};
use crate::model::{NeuralConfig, NeuralModel, OracleModel, TabularModel, Trainable, UniformModel};
use crate::rng::{seeded, Rng as ChaRng};
use crate::sampler::{ao_sample, enfe_analytic, sample, unmask_prob_raw, SamplingMethod, StepGrid};
use crate::schedule::NoiseSchedule;
use crate::space::{total_variation, ExactJointTable, SequenceState, Vocab};

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Relative perturbation applied to the concrete-score scalar (negative control).
    pub score_perturbation: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<28} {:>12} {:>10} {:>9}  {}\n",
            "check", "error", "tolerance", "ms", "result"
        );
        for c in &self.checks {
            out += &format!(
                "{:<28} {:>12.3e} {:>10.1e} {:>9.1}  {}\n",
                c.name,
                c.error,
                c.tolerance,
                c.elapsed_ms,
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
        out
    }
}

/// `exp(a R)` for the absorbing generator `R` on `N + 1` states (rows sum to 0),
/// by scaling and squaring a Taylor series.
pub fn absorbing_expm(n: usize, a: f64) -> Vec<Vec<f64>> {
    let size = n + 1;
    let mut gen = vec![vec![0.0; size]; size];
    for (i, row) in gen.iter_mut().enumerate().take(n) {
        row[i] = -1.0;
        row[n] = 1.0;
    }
    let mut squarings = 0;
    let mut scale = a;
    while scale > 0.25 {
        scale /= 2.0;
        squarings += 1;
    }
    let mut result = identity(size);
    let mut term = identity(size);
    for k in 1..30 {
        term = matmul(&term, &gen)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v * scale / k as f64).collect())
            .collect();
        for (ri, ti) in result.iter_mut().zip(&term) {
            ri.iter_mut().zip(ti).for_each(|(r, t)| *r += t);
        }
    }
    for _ in 0..squarings {
        result = matmul(&result, &result);
    }
    result
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

/// `p_t(x_t)` by summing over every clean sequence with matrix-exponential transitions.
fn brute_marginal(p0: &ExactJointTable, x_t: &SequenceState, trans: &[Vec<f64>]) -> f64 {
    p0.states()
        .map(|(x0, p)| {
            p * x0
                .tokens()
                .iter()
                .zip(x_t.tokens())
                .map(|(&a, &b)| trans[a as usize][b as usize])
                .product::<f64>()
        })
        .sum()
}

/// All sequences over `[0, N]^d`, position 0 most significant.
fn all_states(vocab: Vocab, d: usize) -> Vec<SequenceState> {
    let base = vocab.n_tokens() + 1;
    (0..base.pow(d as u32))
        .map(|mut idx| {
            let mut tokens = vec![0u32; d];
            for slot in tokens.iter_mut().rev() {
                *slot = (idx % base) as u32;
                idx /= base;
            }
            SequenceState::new(tokens)
        })
        .collect()
}

struct Instance {
    kernel: ForwardKernel,
    p0: ExactJointTable,
    d: usize,
}

fn random_instance(rng: &mut ChaRng) -> Instance {
    let n = rng.gen_range(2..=3);
    let d = rng.gen_range(1..=4);
    let vocab = Vocab::new(n).unwrap();
    let schedule = if rng.gen_bool(0.5) {
        NoiseSchedule::log_linear(rng.gen_range(1e-4..0.1)).unwrap()
    } else {
        NoiseSchedule::geometric(1e-3, rng.gen_range(2.0..8.0)).unwrap()
    };
    let p0 = ExactJointTable::random(vocab, d, rng.gen_range(0.5..2.0), rng).unwrap();
    Instance {
        kernel: ForwardKernel::new(schedule, vocab),
        p0,
        d,
    }
}

fn random_noisy(inst: &Instance, rng: &mut ChaRng, at_least_one_mask: bool) -> SequenceState {
    let vocab = inst.kernel.vocab;
    loop {
        let tokens: Vec<u32> = (0..inst.d)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    vocab.mask_id()
                } else {
                    rng.gen_range(0..vocab.n_tokens() as u32)
                }
            })
            .collect();
        let x = SequenceState::new(tokens);
        if !at_least_one_mask || x.masked_count(vocab) > 0 {
            return x;
        }
    }
}

fn random_time(inst: &Instance, rng: &mut ChaRng) -> f64 {
    inst.kernel.schedule.horizon() * rng.gen_range(0.02..1.0)
}

/// Scores are O(1/t); compare relative to magnitude once it exceeds 1.
fn scaled_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn check_score_factorization(opts: &VerifyOptions) -> f64 {
    let mut rng = seeded(opts.seed ^ 1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let inst = random_instance(&mut rng);
        let x_t = random_noisy(&inst, &mut rng, true);
        let t = random_time(&inst, &mut rng);
        let vocab = inst.kernel.vocab;
        let masked: Vec<usize> = x_t.masked_positions(vocab).collect();
        let i = masked[rng.gen_range(0..masked.len())];
        let token = rng.gen_range(0..vocab.n_tokens() as u32);
        let trans = absorbing_expm(vocab.n_tokens(), inst.kernel.schedule.sigma_bar(t));
        let mut x_hat = x_t.clone();
        x_hat.set(i, token);
        let ratio =
            brute_marginal(&inst.p0, &x_hat, &trans) / brute_marginal(&inst.p0, &x_t, &trans);
        let score = inst
            .kernel
            .concrete_score(&inst.p0, &x_t, i, token, t)
            .unwrap()
            * (1.0 + opts.score_perturbation);
        worst = worst.max(scaled_err(score, ratio));
    }
    worst
}

fn check_transition_expm(opts: &VerifyOptions) -> f64 {
    let mut rng = seeded(opts.seed ^ 2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let inst = random_instance(&mut rng);
        let horizon = inst.kernel.schedule.horizon();
        let (a, b) = (rng.gen_range(0.0..horizon), rng.gen_range(0.0..horizon));
        let (s, t) = (a.min(b), a.max(b));
        let n = inst.kernel.vocab.n_tokens();
        let m = absorbing_expm(
            n,
            inst.kernel.schedule.sigma_bar(t) - inst.kernel.schedule.sigma_bar(s),
        );
        for from in 0..=n {
            for to in 0..=n {
                let p = inst
                    .kernel
                    .transition_prob(from as u32, to as u32, s, t)
                    .unwrap();
                worst = worst.max((p - m[from][to]).abs());
            }
        }
    }
    worst
}

fn check_chapman_kolmogorov(opts: &VerifyOptions) -> f64 {
    let mut rng = seeded(opts.seed ^ 3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let inst = random_instance(&mut rng);
        let h = inst.kernel.schedule.horizon();
        let mut ts = [
            rng.gen_range(0.0..h),
            rng.gen_range(0.0..h),
            rng.gen_range(0.0..h),
        ];
        ts.sort_by(f64::total_cmp);
        let [s, u, t] = ts;
        let n = inst.kernel.vocab.n_tokens() as u32;
        for a in 0..=n {
            for b in 0..=n {
                let via: f64 = (0..=n)
                    .map(|m| {
                        inst.kernel.transition_prob(a, m, s, u).unwrap()
                            * inst.kernel.transition_prob(m, b, u, t).unwrap()
                    })
                    .sum();
                worst = worst.max((via - inst.kernel.transition_prob(a, b, s, t).unwrap()).abs());
            }
        }
    }
    worst
}

fn check_joint_law(opts: &VerifyOptions) -> f64 {
    let mut rng = seeded(opts.seed ^ 4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let inst = random_instance(&mut rng);
        let t = random_time(&inst, &mut rng);
        let trans = absorbing_expm(
            inst.kernel.vocab.n_tokens(),
            inst.kernel.schedule.sigma_bar(t),
        );
        for x_t in all_states(inst.kernel.vocab, inst.d) {
            let analytic = inst.kernel.joint_prob(&inst.p0, &x_t, t).unwrap();
            worst = worst.max((analytic - brute_marginal(&inst.p0, &x_t, &trans)).abs());
        }
    }
    worst
}

fn check_conditional(opts: &VerifyOptions) -> f64 {
    let mut rng = seeded(opts.seed ^ 5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let inst = random_instance(&mut rng);
        let x_t = random_noisy(&inst, &mut rng, true);
        let t = random_time(&inst, &mut rng);
        let vocab = inst.kernel.vocab;
        let n = vocab.n_tokens();
        let trans = absorbing_expm(n, inst.kernel.schedule.sigma_bar(t));
        // Posterior of the clean token at each masked position given x_t.
        let mut post = vec![0.0; inst.d * n];
        let mut total = 0.0;
        for (x0, p) in inst.p0.states() {
            let like: f64 = x0
                .tokens()
                .iter()
                .zip(x_t.tokens())
                .map(|(&a, &b)| trans[a as usize][b as usize])
                .product();
            total += p * like;
            for i in x_t.masked_positions(vocab) {
                post[i * n + x0.get(i) as usize] += p * like;
            }
        }
        let rows = inst.p0.conditional_of(&x_t).unwrap();
        for i in x_t.masked_positions(vocab) {
            for j in 0..n {
                worst = worst.max((post[i * n + j] / total - rows[i * n + j]).abs());
            }
        }
    }
    worst
}

/// Returns (max deviation from Bayes' rule, max deviation of row sums from 1).
fn check_reverse_kernel(opts: &VerifyOptions) -> (f64, f64) {
    let mut rng = seeded(opts.seed ^ 6);
    let (mut worst, mut worst_sum): (f64, f64) = (0.0, 0.0);
    for _ in 0..30 {
        let inst = random_instance(&mut rng);
        let x_t = random_noisy(&inst, &mut rng, false);
        let t = random_time(&inst, &mut rng);
        let s = if rng.gen_bool(0.2) {
            0.0
        } else {
            t * rng.gen_range(0.0..1.0)
        };
        let sched = inst.kernel.schedule;
        let n = inst.kernel.vocab.n_tokens();
        let at_t = absorbing_expm(n, sched.sigma_bar(t));
        let at_s = absorbing_expm(n, sched.sigma_bar(s));
        let step = absorbing_expm(n, sched.sigma_bar(t) - sched.sigma_bar(s));
        let p_t = brute_marginal(&inst.p0, &x_t, &at_t);
        let mut sum = 0.0;
        for x_s in all_states(inst.kernel.vocab, inst.d) {
            let analytic = inst
                .kernel
                .exact_reverse_prob(&inst.p0, &x_s, &x_t, s, t)
                .unwrap();
            let fwd: f64 = x_s
                .tokens()
                .iter()
                .zip(x_t.tokens())
                .map(|(&a, &b)| step[a as usize][b as usize])
                .product();
            let bayes = fwd * brute_marginal(&inst.p0, &x_s, &at_s) / p_t;
            worst = worst.max((analytic - bayes).abs());
            sum += analytic;
        }
        worst_sum = worst_sum.max((sum - 1.0).abs());
    }
    (worst, worst_sum)
}

fn random_tabular(vocab: Vocab, d: usize, rng: &mut ChaRng) -> TabularModel {
    let mut m = TabularModel::zeros(vocab, d).unwrap();
    m.params_mut()
        .iter_mut()
        .for_each(|v| *v = rng.gen_range(-2.0..2.0));
    m
}

/// Returns errors of (ldce vs ao, dse - tdce vs d h, tdce + d h vs restricted ldce).
fn check_loss_chain(opts: &VerifyOptions) -> (f64, f64, f64) {
    let mut rng = seeded(opts.seed ^ 7);
    let (mut e1, mut e2, mut e3): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..50 {
        let vocab = Vocab::new(rng.gen_range(2..=3)).unwrap();
        let d = rng.gen_range(1..=4);
        let model = random_tabular(vocab, d, &mut rng);
        let x0 = SequenceState::new(
            (0..d)
                .map(|_| rng.gen_range(0..vocab.n_tokens() as u32))
                .collect(),
        );
        let kernel = ForwardKernel::new(
            NoiseSchedule::log_linear(rng.gen_range(1e-4..0.1)).unwrap(),
            vocab,
        );
        let nodes = d.div_ceil(2);
        let ao = exact_loss_ao(&model, &x0).unwrap();
        let ldce =
            exact_loss_quadrature(&model, &x0, &kernel, QuadratureKind::Ldce, nodes).unwrap();
        let tdce =
            exact_loss_quadrature(&model, &x0, &kernel, QuadratureKind::Tdce, nodes).unwrap();
        let dse = exact_loss_quadrature(&model, &x0, &kernel, QuadratureKind::Dse, nodes).unwrap();
        let top = kernel.schedule.lambda_max();
        let residual = d as f64 * entropy_residual(top);
        let restricted = exact_loss_ldce_upto(&model, &x0, top, nodes).unwrap();
        e1 = e1.max((ldce - ao).abs());
        e2 = e2.max((dse - tdce - residual).abs());
        e3 = e3.max((tdce + residual - restricted).abs());
    }
    (e1, e2, e3)
}

fn check_oracle_floor(opts: &VerifyOptions) -> f64 {
    let mut rng = seeded(opts.seed ^ 8);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let inst = random_instance(&mut rng);
        let model = OracleModel::new(inst.p0.clone());
        let expected: f64 = inst
            .p0
            .states()
            .map(|(x, p)| p * exact_loss_ao(&model, &x).unwrap())
            .sum();
        worst = worst.max((expected - inst.p0.entropy()).abs());
    }
    worst
}

fn check_psi_equivalence() -> f64 {
    let schedule = NoiseSchedule::log_linear(1e-3).unwrap();
    let mut worst: f64 = 0.0;
    for a in 1..=100 {
        for b in 0..100 {
            let t = a as f64 / 100.0;
            let s = t * b as f64 / 100.0;
            let tw = unmask_prob_raw(&schedule, SamplingMethod::Tweedie, s, t).unwrap();
            let eu = unmask_prob_raw(&schedule, SamplingMethod::Euler, s, t).unwrap();
            worst = worst.max((tw - eu).abs()).max((tw - (t - s) / t).abs());
        }
    }
    worst
}

fn check_enfe_closed_form() -> f64 {
    let kernel = ForwardKernel::new(
        NoiseSchedule::log_linear(1e-3).unwrap(),
        Vocab::new(2).unwrap(),
    );
    let mut worst: f64 = 0.0;
    for n in [1, 2, 8, 32, 128, 1024] {
        let grid = StepGrid::uniform(n, 1.0).unwrap();
        for l in [1, 8, 64, 1024] {
            let closed = n as f64 * (1.0 - (1.0 - 1.0 / n as f64).powi(l));
            for method in [SamplingMethod::Tweedie, SamplingMethod::Euler] {
                let v = enfe_analytic(&kernel, &grid, method, l as usize).unwrap();
                worst = worst.max((v - closed).abs() / closed);
            }
        }
    }
    worst
}

/// Number of (seed, grid, model) triples where cached and uncached sampling disagree
/// or the cached run exceeds `n` model calls.
fn check_cache_soundness(opts: &VerifyOptions) -> f64 {
    let mut rng = seeded(opts.seed ^ 9);
    let mut bad = 0;
    for run in 0..100u64 {
        let inst = random_instance(&mut rng);
        let model = OracleModel::new(inst.p0.clone());
        let n = rng.gen_range(1..=12);
        let grid = StepGrid::uniform(n, inst.kernel.schedule.horizon()).unwrap();
        let method = if run % 2 == 0 {
            SamplingMethod::Tweedie
        } else {
            SamplingMethod::Euler
        };
        let a = sample(
            &model,
            &inst.kernel,
            &grid,
            method,
            true,
            None,
            &mut seeded(run),
        )
        .unwrap();
        let b = sample(
            &model,
            &inst.kernel,
            &grid,
            method,
            false,
            None,
            &mut seeded(run),
        )
        .unwrap();
        if a.sequence != b.sequence || (a.nfe > n && !a.forced_fill) {
            bad += 1;
        }
    }
    bad as f64
}

fn empirical_tv(p0: &ExactJointTable, draws: impl Iterator<Item = SequenceState>) -> f64 {
    let mut counts = vec![0.0; p0.n_states()];
    let mut total = 0.0;
    for x in draws {
        counts[p0.index_of(&x).unwrap()] += 1.0;
        total += 1.0;
    }
    counts.iter_mut().for_each(|c| *c /= total);
    total_variation(&counts, p0.probs())
}

fn check_one_dim_sampling(opts: &VerifyOptions) -> f64 {
    let vocab = Vocab::new(3).unwrap();
    let p0 = ExactJointTable::new(vocab, 1, vec![0.6, 0.3, 0.1]).unwrap();
    let model = OracleModel::new(p0.clone());
    let kernel = ForwardKernel::new(NoiseSchedule::default(), vocab);
    let grid = StepGrid::uniform(4, 1.0).unwrap();
    let mut rng = seeded(opts.seed ^ 10);
    empirical_tv(
        &p0,
        (0..100_000).map(|_| {
            sample(
                &model,
                &kernel,
                &grid,
                SamplingMethod::Tweedie,
                true,
                None,
                &mut rng,
            )
            .unwrap()
            .sequence
        }),
    )
}

fn check_ao_sampling(opts: &VerifyOptions) -> f64 {
    let vocab = Vocab::new(2).unwrap();
    let mut rng = seeded(opts.seed ^ 11);
    let p0 = ExactJointTable::random(vocab, 3, 0.7, &mut rng).unwrap();
    let model = OracleModel::new(p0.clone());
    empirical_tv(
        &p0,
        (0..100_000).map(|_| ao_sample(&model, None, &mut rng).unwrap().sequence),
    )
}

/// Max relative error of analytic vs central-difference gradients of each loss sample.
fn check_neural_gradients(opts: &VerifyOptions) -> f64 {
    let vocab = Vocab::new(3).unwrap();
    let cfg = NeuralConfig {
        embed: 4,
        hidden1: 8,
        hidden2: 8,
        window: 1,
    };
    let model = NeuralModel::new(vocab, 4, cfg, opts.seed ^ 12).unwrap();
    let kernel = ForwardKernel::new(NoiseSchedule::default(), vocab);
    let x0 = SequenceState::new(vec![0, 2, 1, 2]);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for kind in LossKind::ALL {
        // A draw seed that masks something, so the gradient is not trivially zero.
        let seed = (0..100)
            .find(|&s| {
                mc_loss(kind, &model, &x0, &kernel, &mut seeded(s))
                    .unwrap()
                    .masked
                    > 0
            })
            .unwrap();
        let analytic = mc_loss_grad(kind, &model, &x0, &kernel, &mut seeded(seed))
            .unwrap()
            .grad
            .unwrap();
        for k in 0..model.num_params() {
            let mut plus = model.clone();
            plus.params_mut()[k] += h;
            let mut minus = model.clone();
            minus.params_mut()[k] -= h;
            let fp = mc_loss(kind, &plus, &x0, &kernel, &mut seeded(seed))
                .unwrap()
                .value;
            let fm = mc_loss(kind, &minus, &x0, &kernel, &mut seeded(seed))
                .unwrap()
                .value;
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max((fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-6));
        }
    }
    worst
}

fn check_uniform_perplexity() -> f64 {
    let vocab = Vocab::new(5).unwrap();
    let model = UniformModel::new(vocab, 3);
    let x0 = SequenceState::new(vec![4, 0, 2]);
    (exact_loss_ao(&model, &x0).unwrap() / 3.0 - 5f64.ln()).abs()
}

/// Runs the whole suite.
pub fn run(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    let mut push = |name: &str, tolerance: f64, error: f64, elapsed_ms: f64| {
        checks.push(CheckResult {
            name: name.to_string(),
            error,
            tolerance,
            passed: error.is_finite() && error < tolerance,
            elapsed_ms,
        });
    };
    fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
        let start = Instant::now();
        let v = f();
        (v, start.elapsed().as_secs_f64() * 1e3)
    }
    let singles: Vec<(&str, f64, Box<dyn Fn() -> f64 + '_>)> = vec![
        (
            "score_factorization",
            1e-12,
            Box::new(|| check_score_factorization(opts)),
        ),
        (
            "transition_vs_expm",
            1e-12,
            Box::new(|| check_transition_expm(opts)),
        ),
        (
            "chapman_kolmogorov",
            1e-12,
            Box::new(|| check_chapman_kolmogorov(opts)),
        ),
        ("joint_law", 1e-12, Box::new(|| check_joint_law(opts))),
        (
            "conditional_law",
            1e-12,
            Box::new(|| check_conditional(opts)),
        ),
    ];
    for (name, tol, f) in singles {
        let (e, ms) = timed(f);
        push(name, tol, e, ms);
    }
    let ((rev, rev_sum), ms) = timed(|| check_reverse_kernel(opts));
    push("reverse_kernel", 1e-10, rev, ms);
    push("reverse_normalization", 1e-10, rev_sum, 0.0);
    let ((e1, e2, e3), ms) = timed(|| check_loss_chain(opts));
    push("ldce_equals_ao", 1e-10, e1, ms);
    push("dse_minus_tdce_residual", 1e-8, e2, 0.0);
    push("tdce_equals_restricted_ldce", 1e-8, e3, 0.0);
    let rest: Vec<(&str, f64, Box<dyn Fn() -> f64 + '_>)> = vec![
        (
            "oracle_floor_entropy",
            1e-10,
            Box::new(|| check_oracle_floor(opts)),
        ),
        (
            "uniform_perplexity",
            1e-12,
            Box::new(check_uniform_perplexity),
        ),
        (
            "psi_tweedie_equals_euler",
            1e-12,
            Box::new(check_psi_equivalence),
        ),
        ("enfe_closed_form", 1e-12, Box::new(check_enfe_closed_form)),
        (
            "cache_soundness",
            0.5,
            Box::new(|| check_cache_soundness(opts)),
        ),
        (
            "one_dim_sampling_tv",
            0.02,
            Box::new(|| check_one_dim_sampling(opts)),
        ),
        ("ao_sampling_tv", 0.02, Box::new(|| check_ao_sampling(opts))),
        (
            "neural_gradients",
            1e-4,
            Box::new(|| check_neural_gradients(opts)),
        ),
    ];
    for (name, tol, f) in rest {
        let (e, ms) = timed(f);
        push(name, tol, e, ms);
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { checks, passed })
}
