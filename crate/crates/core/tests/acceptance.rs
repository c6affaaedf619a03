//! Acceptance suite: one PASS/FAIL line per criterion, with timings.
//!
//! Runs without the libtest harness so the lines always reach the terminal.
//! `RADD_ACCEPTANCE=1,3,7` restricts the run to the listed criteria.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use common::*;
use radd::corpus::{decode_block, Corpus, Split};
use radd::eval::{perplexity, Estimator};
use radd::losses::{
    exact_loss, exact_loss_ao, exact_loss_quadrature, mc_loss_grad, QuadratureKind,
};
use radd::model::{ConditionalModel, NeuralConfig, NeuralModel, Trainable};
use radd::rng::{seeded, substream};
use radd::sampler::{ao_sample, sample, sample_many, unmask_prob_raw, SamplerSpec};
use radd::trainer::{train, CorpusSource, Probe, TableSource, TrainConfig};
use radd::{
    ExactJointTable, ForwardKernel, LossKind, NoiseSchedule, SamplingMethod, SequenceState,
    StepGrid, Vocab,
};
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn random_kernel<R: Rng>(rng: &mut R, n: usize) -> ForwardKernel {
    let schedule = if rng.gen_bool(0.5) {
        NoiseSchedule::log_linear(rng.gen_range(1e-4..0.05)).unwrap()
    } else {
        NoiseSchedule::geometric(1e-3, rng.gen_range(2.0..8.0)).unwrap()
    };
    ForwardKernel::new(schedule, Vocab::new(n).unwrap())
}

fn random_noisy<R: Rng>(rng: &mut R, n: usize, d: usize, need_mask: bool) -> SequenceState {
    loop {
        let toks: Vec<u32> = (0..d).map(|_| rng.gen_range(0..=n as u32)).collect();
        if !need_mask || toks.contains(&(n as u32)) {
            return SequenceState::new(toks);
        }
    }
}

fn criterion_1() -> Outcome {
    let mut rng = seeded(101);
    let mut worst: f64 = 0.0;
    let mut worst_rel: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(2..=3);
        let d = rng.gen_range(1..=4);
        let p0 = random_table(&mut rng, n, d);
        let kernel = random_kernel(&mut rng, n);
        let t = kernel.schedule.horizon() * rng.gen_range(f64::EPSILON..1.0);
        let x = random_noisy(&mut rng, n, d, true);
        let masked: Vec<usize> = (0..d).filter(|&i| x.get(i) == n as u32).collect();
        let i = masked[rng.gen_range(0..masked.len())];
        let tok = rng.gen_range(0..n as u32);
        let mut x_hat = x.clone();
        x_hat.set(i, tok);
        let trans = transition_matrix(n, kernel.schedule.sigma_bar(t));
        let ratio = marginal(&p0, &x_hat, &trans) / marginal(&p0, &x, &trans);
        let cond = p0.conditional_of(&x).unwrap()[i * n + tok as usize];
        let keep = (-kernel.schedule.sigma_bar(t)).exp();
        let factored = keep / (1.0 - keep) * cond;
        let via_kernel = kernel.concrete_score(&p0, &x, i, tok, t).unwrap();
        let err = (ratio - factored).abs().max((ratio - via_kernel).abs());
        worst = worst.max(err);
        worst_rel = worst_rel.max(err / ratio.abs().max(1.0));
    }
    // The joint ratio grows like 1/t; for t near 0 absolute round-off tracks the magnitude.
    outcome(
        worst_rel < 1e-12,
        format!("200 instances; max abs err {worst:.2e}, max err relative to max(1,|ratio|) {worst_rel:.2e} (tol 1e-12)"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = seeded(202);
    let (mut joint, mut cond, mut rev, mut norm): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..60 {
        let n = rng.gen_range(2..=3);
        let d = rng.gen_range(1..=4);
        let p0 = random_table(&mut rng, n, d);
        let kernel = random_kernel(&mut rng, n);
        let h = kernel.schedule.horizon();
        let t = h * rng.gen_range(0.01..1.0);
        let s = if rng.gen_bool(0.2) {
            0.0
        } else {
            t * rng.gen_range(0.0..1.0)
        };
        let tr_t = transition_matrix(n, kernel.schedule.sigma_bar(t));
        let tr_s = transition_matrix(n, kernel.schedule.sigma_bar(s));
        let tr_st = transition_matrix(
            n,
            kernel.schedule.sigma_bar(t) - kernel.schedule.sigma_bar(s),
        );
        let states = all_sequences(n as u32, d);
        for x in &states {
            let brute = marginal(&p0, x, &tr_t);
            joint = joint.max((kernel.joint_prob(&p0, x, t).unwrap() - brute).abs());
        }
        // Conditional of clean tokens at masked positions given a noisy state.
        let x = random_noisy(&mut rng, n, d, true);
        let rows = p0.conditional_of(&x).unwrap();
        let mut post = vec![0.0; d * n];
        let mut total = 0.0;
        for idx in 0..p0.n_states() {
            let x0 = p0.decode(idx);
            let w: f64 = p0.probs()[idx]
                * (0..d)
                    .map(|i| tr_t[x0.get(i) as usize][x.get(i) as usize])
                    .product::<f64>();
            total += w;
            for i in (0..d).filter(|&i| x.get(i) == n as u32) {
                post[i * n + x0.get(i) as usize] += w;
            }
        }
        for i in (0..d).filter(|&i| x.get(i) == n as u32) {
            for j in 0..n {
                cond = cond.max((rows[i * n + j] - post[i * n + j] / total).abs());
            }
        }
        // Reverse kernel by Bayes' rule.
        let x_t = random_noisy(&mut rng, n, d, false);
        let p_t = marginal(&p0, &x_t, &tr_t);
        let mut sum = 0.0;
        for x_s in &states {
            let fwd: f64 = (0..d)
                .map(|i| tr_st[x_s.get(i) as usize][x_t.get(i) as usize])
                .product();
            let bayes = fwd * marginal(&p0, x_s, &tr_s) / p_t;
            let analytic = kernel.exact_reverse_prob(&p0, x_s, &x_t, s, t).unwrap();
            rev = rev.max((analytic - bayes).abs());
            sum += analytic;
        }
        norm = norm.max((sum - 1.0).abs());
    }
    outcome(
        joint < 1e-12 && cond < 1e-12 && rev < 1e-10 && norm < 1e-10,
        format!(
            "joint {joint:.2e} (1e-12), conditional {cond:.2e} (1e-12), reverse {rev:.2e} (1e-10), reverse sums {norm:.2e} (1e-10)"
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = seeded(303);
    let (mut e_ldce, mut e_ao, mut e_dse, mut e_restricted): (f64, f64, f64, f64) =
        (0.0, 0.0, 0.0, 0.0);
    for _ in 0..50 {
        let n = rng.gen_range(2..=3);
        let d = rng.gen_range(1..=4);
        let model = random_tabular(&mut rng, n, d);
        let x0 = SequenceState::new((0..d).map(|_| rng.gen_range(0..n as u32)).collect());
        let eps = rng.gen_range(1e-4..0.05);
        let kernel = ForwardKernel::new(NoiseSchedule::log_linear(eps).unwrap(), model.vocab());
        let reference = ao_loss_by_orders(&model, &x0);
        let nodes = d.div_ceil(2);
        let ldce =
            exact_loss_quadrature(&model, &x0, &kernel, QuadratureKind::Ldce, nodes).unwrap();
        let ao = exact_loss_ao(&model, &x0).unwrap();
        let tdce =
            exact_loss_quadrature(&model, &x0, &kernel, QuadratureKind::Tdce, nodes).unwrap();
        let dse = exact_loss_quadrature(&model, &x0, &kernel, QuadratureKind::Dse, nodes).unwrap();
        let residual = d as f64 * binary_entropy(1.0 - eps);
        let restricted = radd::losses::exact_loss_ldce_upto(&model, &x0, 1.0 - eps, nodes).unwrap();
        e_ldce = e_ldce.max((ldce - reference).abs());
        e_ao = e_ao.max((ao - reference).abs());
        e_dse = e_dse.max((dse - tdce - residual).abs());
        e_restricted = e_restricted.max((tdce + residual - restricted).abs());
    }
    outcome(
        e_ldce < 1e-10 && e_ao < 1e-10 && e_dse < 1e-8 && e_restricted < 1e-8,
        format!(
            "50 models; ldce vs all-orders AO {e_ldce:.2e}, subset-sum AO {e_ao:.2e} (1e-10); dse-tdce vs d*h {e_dse:.2e}, tdce+d*h vs ldce on [0,lambda(T)] {e_restricted:.2e} (1e-8)"
        ),
    )
}

fn criterion_4() -> Outcome {
    let draws = 100_000;
    let mut rng = seeded(404);
    let model = random_tabular(&mut rng, 2, 3);
    let x0 = SequenceState::new(vec![0, 1, 1]);
    let kernel = ForwardKernel::new(NoiseSchedule::default(), model.vocab());
    let p = model.num_params();
    let mut values = Vec::new();
    let mut grads: Vec<Vec<Moments>> = Vec::new();
    let mut lines = Vec::new();
    let mut passed = true;
    for (li, kind) in LossKind::ALL.into_iter().enumerate() {
        let mut v = Moments::default();
        let mut g = vec![Moments::default(); p];
        for k in 0..draws {
            let mut r = substream(4040, li as u64, k as u64);
            let s = mc_loss_grad(kind, &model, &x0, &kernel, &mut r).unwrap();
            v.push(s.value);
            for (m, x) in g.iter_mut().zip(s.grad.unwrap()) {
                m.push(x);
            }
        }
        let exact = exact_loss(kind, &model, &x0, &kernel).unwrap();
        let z = (v.mean - exact).abs() / v.se();
        passed &= z < 3.0;
        lines.push(format!("{kind} z={z:.2}"));
        values.push(v);
        grads.push(g);
    }
    let mut worst_z: f64 = 0.0;
    let mut violations = 0;
    let mut compared = 0;
    for a in 0..4 {
        for b in a + 1..4 {
            for k in 0..p {
                let (ga, gb) = (&grads[a][k], &grads[b][k]);
                let sd = (ga.se().powi(2) + gb.se().powi(2)).sqrt();
                let diff = (ga.mean - gb.mean).abs();
                if sd == 0.0 {
                    if diff != 0.0 {
                        violations += 1;
                    }
                    continue;
                }
                compared += 1;
                let z = diff / sd;
                worst_z = worst_z.max(z);
                if z >= 3.0 {
                    violations += 1;
                }
            }
        }
    }
    passed &= violations == 0;
    outcome(
        passed,
        format!(
            "10^5 draws each; loss |mean-exact|/se: {}; gradients: {compared} pairwise coordinate comparisons, max z {worst_z:.2}, {violations} at or above 3 sigma",
            lines.join(", ")
        ),
    )
}

fn criterion_5() -> Outcome {
    let kernel = ForwardKernel::new(NoiseSchedule::default(), Vocab::new(2).unwrap());
    let trajectories = 10_000;
    let mut passed = true;
    let mut parts = Vec::new();
    for &l in &[8usize, 64] {
        let model = radd::UniformModel::new(Vocab::new(2).unwrap(), l);
        for &n in &[2usize, 8, 32, 128] {
            let closed = n as f64 * (1.0 - (1.0 - 1.0 / n as f64).powi(l as i32));
            let grid = StepGrid::uniform(n, 1.0).unwrap();
            let spec = SamplerSpec {
                kernel,
                grid,
                method: SamplingMethod::Tweedie,
                cache: true,
                prompt: None,
            };
            let report = sample_many(&model, &spec, trajectories, 500 + n as u64).unwrap();
            let mut m = Moments::default();
            report.nfe.iter().for_each(|&v| m.push(v as f64));
            // Every trajectory can make the same number of calls (n = 2, l = 64); then the mean must be exact.
            let z = if m.se() == 0.0 {
                if (m.mean - closed).abs() <= 1e-12 * closed {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (m.mean - closed).abs() / m.se()
            };
            passed &= z < 3.0 && report.forced_fills == 0;
            parts.push(format!(
                "(n={n},l={l}) {:.3} vs {closed:.3} z={z:.2}",
                m.mean
            ));
        }
    }
    let big = 128.0 * (1.0 - (127.0f64 / 128.0).powi(64));
    passed &= big < 0.5 * 128.0;
    outcome(
        passed,
        format!("{}; n=128,l=64 analytic {big:.3} << 128", parts.join("; ")),
    )
}

fn criterion_6() -> Outcome {
    let schedule = NoiseSchedule::default();
    let mut psi_err: f64 = 0.0;
    for a in 1..=100 {
        for b in 0..100 {
            let t = a as f64 / 100.0;
            let s = t * b as f64 / 100.0;
            let tw = unmask_prob_raw(&schedule, SamplingMethod::Tweedie, s, t).unwrap();
            let eu = unmask_prob_raw(&schedule, SamplingMethod::Euler, s, t).unwrap();
            psi_err = psi_err.max((tw - eu).abs()).max((tw - (t - s) / t).abs());
        }
    }
    let mut rng = seeded(606);
    let mut mismatches = 0;
    for run in 0..100u64 {
        let model = random_tabular(&mut rng, 3, 4);
        let kernel = random_kernel(&mut rng, 3);
        let grid = StepGrid::uniform(rng.gen_range(1..=20), kernel.schedule.horizon()).unwrap();
        let method = if run % 2 == 0 {
            SamplingMethod::Tweedie
        } else {
            SamplingMethod::Euler
        };
        let on = sample(&model, &kernel, &grid, method, true, None, &mut seeded(run)).unwrap();
        let off = sample(
            &model,
            &kernel,
            &grid,
            method,
            false,
            None,
            &mut seeded(run),
        )
        .unwrap();
        if on.sequence != off.sequence {
            mismatches += 1;
        }
    }
    outcome(
        psi_err < 1e-12 && mismatches == 0,
        format!("psi tweedie vs euler vs (t-s)/t on 10^4 points {psi_err:.2e} (1e-12); cache on/off mismatches {mismatches}/100"),
    )
}

fn bundled_train_config() -> TrainConfig {
    let text =
        std::fs::read_to_string(workspace_root().join("configs/synthetic_ldce.json")).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    serde_json::from_value(doc["train"].clone()).unwrap()
}

fn criterion_7() -> Outcome {
    let path = workspace_root().join("configs/fixtures/mixture_d4_n4.json");
    let p0 = ExactJointTable::from_json(&std::fs::read_to_string(path).unwrap()).unwrap();
    let h = entropy(p0.probs());
    let kernel = ForwardKernel::new(NoiseSchedule::default(), p0.vocab());
    let mut cfg = bundled_train_config();
    cfg.record_wallclock = false;
    let fit = |loss: LossKind| {
        let mut c = cfg.clone();
        c.loss = loss;
        let mut data = TableSource::new(p0.clone(), c.seed);
        let init = radd::TabularModel::zeros(p0.vocab(), p0.d()).unwrap();
        train(
            init,
            &mut data,
            &kernel,
            &c,
            Some(&Probe::Table(p0.clone())),
            |_| {},
        )
        .unwrap()
        .model
    };
    let expected_ao = |m: &dyn ConditionalModel| -> f64 {
        (0..p0.n_states())
            .map(|i| p0.probs()[i] * ao_loss_by_orders(m, &p0.decode(i)))
            .sum()
    };
    let ldce_model = fit(LossKind::Ldce);
    let ldce_loss = expected_ao(&ldce_model);
    let grid = StepGrid::uniform(64, 1.0).unwrap();
    let spec = SamplerSpec {
        kernel,
        grid,
        method: SamplingMethod::Tweedie,
        cache: true,
        prompt: None,
    };
    let report = sample_many(&ldce_model, &spec, 50_000, 77).unwrap();
    let mut empirical = vec![0.0; p0.n_states()];
    for s in &report.sequences {
        empirical[p0.index_of(s).unwrap()] += 1.0 / 50_000.0;
    }
    let sample_tv = tv(&empirical, p0.probs());
    let ao_loss = expected_ao(&fit(LossKind::Ao));
    let gap = (ldce_loss - h) / h;
    outcome(
        gap.abs() < 0.05 && sample_tv < 0.05 && (ao_loss - ldce_loss).abs() < 0.05,
        format!(
            "H(p0) {h:.4}; ldce-trained AO loss {ldce_loss:.4} ({:+.2}%, tol 5%); sample TV {sample_tv:.4} (0.05); AO-trained {ao_loss:.4}, |diff| {:.4} (0.05)",
            100.0 * gap,
            (ao_loss - ldce_loss).abs()
        ),
    )
}

fn criterion_8() -> Outcome {
    let vocab = Vocab::new(5).unwrap();
    let model = NeuralModel::new(vocab, 6, NeuralConfig::default(), 808).unwrap();
    let kernel = ForwardKernel::new(NoiseSchedule::default(), vocab);
    let x0 = SequenceState::new(vec![0, 4, 2, 2, 1, 3]);
    // Fourth-order stencil: truncation ~h^4 and round-off ~eps/h both stay near 1e-12.
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for kind in LossKind::ALL {
        let seed = (0..1000u64)
            .find(|&s| {
                let v = mc_loss_grad(kind, &model, &x0, &kernel, &mut seeded(s)).unwrap();
                v.masked >= 2
            })
            .unwrap();
        let analytic = mc_loss_grad(kind, &model, &x0, &kernel, &mut seeded(seed))
            .unwrap()
            .grad
            .unwrap();
        let value_at = |params: &[f64]| {
            let m = NeuralModel::from_params(vocab, 6, NeuralConfig::default(), params.to_vec())
                .unwrap();
            radd::losses::mc_loss(kind, &m, &x0, &kernel, &mut seeded(seed))
                .unwrap()
                .value
        };
        let mut params = model.params().to_vec();
        let mut kind_worst: f64 = 0.0;
        for k in 0..params.len() {
            let orig = params[k];
            let mut at = |step: f64| {
                params[k] = orig + step;
                value_at(&params)
            };
            let fd = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            params[k] = orig;
            let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-6);
            kind_worst = kind_worst.max(rel);
        }
        parts.push(format!("{kind} {kind_worst:.2e}"));
        worst = worst.max(kind_worst);
    }
    outcome(
        worst < 1e-4,
        format!(
            "{} params; max relative error per loss: {} (tol 1e-4)",
            model.num_params(),
            parts.join(", ")
        ),
    )
}

fn criterion_9() -> Outcome {
    let path = workspace_root().join("data/state_of_the_union_1790_1831.txt");
    let corpus = Corpus::load(&path, 32).unwrap();
    let train_blocks = corpus.blocks(Split::Train, 0.05).unwrap();
    let held = corpus.blocks(Split::Heldout, 0.05).unwrap();
    let vocab = corpus.vocab();
    let kernel = ForwardKernel::new(NoiseSchedule::default(), vocab);
    let cfg = TrainConfig {
        loss: LossKind::Ldce,
        steps: 10_000,
        batch: 32,
        lr: 2e-3,
        ema_decay: 0.999,
        seed: 9,
        log_every: 100,
        probe_every: 0,
        record_wallclock: false,
        ..TrainConfig::default()
    };
    let untrained = NeuralModel::new(vocab, 32, NeuralConfig::default(), 9).unwrap();
    let eval_set: Vec<SequenceState> = held.iter().take(2000).cloned().collect();
    let est = Estimator::Mc { draws: 4, seed: 99 };
    let before = perplexity(&untrained, &eval_set, &kernel, LossKind::Ao, est)
        .unwrap()
        .perplexity;
    let mut data = CorpusSource::new(train_blocks, vocab, cfg.seed).unwrap();
    let start = Instant::now();
    let trained = train(untrained, &mut data, &kernel, &cfg, None, |_| {})
        .unwrap()
        .model;
    let ms_per_step = start.elapsed().as_secs_f64() * 1e3 / cfg.steps as f64;
    let report = perplexity(&trained, &eval_set, &kernel, LossKind::Ao, est).unwrap();
    let mut rng = seeded(909);
    let mut texts = Vec::new();
    let mut decodable = true;
    for _ in 0..4 {
        let seq = ao_sample(&trained, None, &mut rng).unwrap().sequence;
        let bytes = decode_block(&seq).unwrap();
        match String::from_utf8(bytes) {
            Ok(s) if !s.is_empty() => texts.push(s),
            _ => decodable = false,
        }
    }
    outcome(
        report.perplexity < 15.0 && decodable && ms_per_step <= 90.0,
        format!(
            "held-out byte perplexity {:.3} +/- {:.3} se in nats/token (untrained {before:.1}; tol < 15); {ms_per_step:.1} ms/step (<= 90); AO samples {:?}",
            report.perplexity,
            report.standard_error,
            texts
        ),
    )
}

type Criterion = (usize, &'static str, f64, fn() -> Outcome);

const CRITERIA: &[Criterion] = &[
    (1, "concrete score factorization", 5.0, criterion_1),
    (2, "joint, conditional and reverse laws", 10.0, criterion_2),
    (3, "exact loss equivalence chain", 30.0, criterion_3),
    (4, "Monte-Carlo unbiasedness", 120.0, criterion_4),
    (5, "expected NFE law", 60.0, criterion_5),
    (
        6,
        "sampler equivalence and cache soundness",
        30.0,
        criterion_6,
    ),
    (7, "end-to-end tabular training", 300.0, criterion_7),
    (8, "neural gradient correctness", 60.0, criterion_8),
    (9, "byte-level corpus demo", 900.0, criterion_9),
];

fn main() {
    // libtest flags (e.g. `--nocapture`, filters) are accepted and ignored.
    let selected: Option<Vec<usize>> = std::env::var("RADD_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let mut failures = 0;
    let mut ran = 0;
    for &(id, name, budget, f) in CRITERIA {
        if selected.as_ref().is_some_and(|sel| !sel.contains(&id)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let ok = result.passed && secs < budget;
        failures += usize::from(!ok);
        println!(
            "criterion {id} {}: {name}: {}; {secs:.1}s (budget {budget:.0}s)",
            if ok { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
