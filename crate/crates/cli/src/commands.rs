use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use radd::corpus::{Corpus, Split};
use radd::eval::{
    distribution_distance, perplexity, perplexity_under_table, unigram_entropy, Estimator,
    NfeSummary,
};
use radd::losses::MAX_EXACT_D;
use radd::model::AnyModel;
use radd::sampler::{
    decode_bytes, enfe_analytic, enfe_uncached, sample_many, write_nfe_csv, NfeRow, SampleReport,
    SamplerSpec,
};
use radd::trainer::{self, CorpusSource, DataSource, MetricRow, Probe, TableSource, TrainOutcome};
use radd::verify::{self, VerifyOptions};
use radd::{
    Backend, ConditionalModel, ExactJointTable, ForwardKernel, NeuralModel, OracleModel, RaddError,
    SequenceState, StepGrid, TabularModel, Trainable, UniformModel, Vocab,
};
use serde_json::json;

use crate::config::{DataConfig, RunConfig};
use crate::{CliError, CommonArgs, EnfeArgs, EvalArgs, SampleArgs, Switch, TrainArgs, VerifyArgs};

/// Sequences probed with exact AO loss during corpus training (when `d` permits).
const CORPUS_PROBE_BLOCKS: usize = 64;
/// Largest `d` evaluated exactly by default.
const AUTO_EXACT_D: usize = 12;

pub fn verify(args: VerifyArgs) -> Result<(), CliError> {
    let report = verify::run(&VerifyOptions {
        score_perturbation: args.perturb_score,
        seed: args.seed,
    })?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.table());
        println!(
            "{}",
            if report.passed {
                "all checks passed"
            } else {
                "verification FAILED"
            }
        );
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::VerifyFailed)
    }
}

enum Data {
    Table(ExactJointTable),
    Corpus {
        corpus: Corpus,
        heldout_fraction: f64,
    },
}

impl Data {
    fn vocab(&self) -> Vocab {
        match self {
            Data::Table(t) => t.vocab(),
            Data::Corpus { corpus, .. } => corpus.vocab(),
        }
    }

    fn d(&self) -> usize {
        match self {
            Data::Table(t) => t.d(),
            Data::Corpus { corpus, .. } => corpus.d(),
        }
    }

    fn split(&self, split: Split) -> Result<Vec<SequenceState>, CliError> {
        match self {
            Data::Table(_) => Err(CliError::Usage("table data has no splits".into())),
            Data::Corpus {
                corpus,
                heldout_fraction,
            } => Ok(corpus.blocks(split, *heldout_fraction)?),
        }
    }
}

/// Config file (if any) with the shared data and output flags applied.
fn base_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(path) = &common.table {
        cfg.data = Some(DataConfig::Table { path: path.clone() });
    }
    if let Some(path) = &common.corpus {
        let heldout_fraction = match &cfg.data {
            Some(DataConfig::Corpus {
                heldout_fraction, ..
            }) => *heldout_fraction,
            _ => 0.05,
        };
        cfg.data = Some(DataConfig::Corpus {
            path: path.clone(),
            d: common.d.unwrap_or(0),
            heldout_fraction,
        });
    } else if let (Some(d), Some(DataConfig::Corpus { d: slot, .. })) = (common.d, &mut cfg.data) {
        *slot = d;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<Option<Data>, CliError> {
    let missing = |p: &Path| CliError::Usage(format!("data file {} does not exist", p.display()));
    match &cfg.data {
        None => Ok(None),
        Some(DataConfig::Table { path }) => {
            let text = fs::read_to_string(path).map_err(|_| missing(path))?;
            Ok(Some(Data::Table(ExactJointTable::from_json(&text)?)))
        }
        Some(DataConfig::Corpus {
            path,
            d,
            heldout_fraction,
        }) => {
            if !path.exists() {
                return Err(missing(path));
            }
            Ok(Some(Data::Corpus {
                corpus: Corpus::load(path, *d)?,
                heldout_fraction: *heldout_fraction,
            }))
        }
    }
}

fn output_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf, CliError> {
    let dir = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(command));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// The effective configuration, written next to the artifacts it produced.
fn archive_config(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(cfg)? + "\n",
    )?;
    Ok(())
}

enum Source {
    Table(TableSource),
    Corpus(CorpusSource),
}

impl DataSource for Source {
    fn vocab(&self) -> Vocab {
        match self {
            Source::Table(s) => s.vocab(),
            Source::Corpus(s) => s.vocab(),
        }
    }

    fn seq_len(&self) -> usize {
        match self {
            Source::Table(s) => s.seq_len(),
            Source::Corpus(s) => s.seq_len(),
        }
    }

    fn next_batch(&mut self, step: usize, batch: usize) -> Vec<SequenceState> {
        match self {
            Source::Table(s) => s.next_batch(step, batch),
            Source::Corpus(s) => s.next_batch(step, batch),
        }
    }
}

fn fit<M: Trainable>(
    model: M,
    source: &mut Source,
    kernel: &ForwardKernel,
    cfg: &RunConfig,
    probe: Option<&Probe>,
    quiet: bool,
) -> Result<TrainOutcome<M>, CliError> {
    let every = (cfg.train.steps / 20).max(1);
    let outcome = trainer::train(
        model,
        source,
        kernel,
        &cfg.train,
        probe,
        |row: &MetricRow| {
            if !quiet && (row.step % every == 0 || row.step == cfg.train.steps) {
                let probe = row
                    .loss_exact_probe
                    .map(|p| format!("  probe {p:.5}"))
                    .unwrap_or_default();
                eprintln!(
                    "step {:>7}  loss {:.5}{probe}  |g| {:.4}",
                    row.step, row.loss_mc, row.grad_norm
                );
            }
        },
    )?;
    Ok(outcome)
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&args.common)?;
    if let Some(v) = args.loss {
        cfg.train.loss = v;
    }
    if let Some(v) = args.backend {
        cfg.model.backend = v.into();
    }
    if let Some(v) = args.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = args.batch {
        cfg.train.batch = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if args.no_wallclock {
        cfg.train.record_wallclock = false;
    }
    cfg.train.validate()?;
    let data = load_data(&cfg)?.ok_or_else(|| {
        CliError::Usage("train needs data: set `data` or pass --table/--corpus".into())
    })?;
    let (vocab, d) = (data.vocab(), data.d());
    let kernel = ForwardKernel::new(cfg.schedule, vocab);
    let (mut source, probe) = match &data {
        Data::Table(t) => {
            let probe = (d <= MAX_EXACT_D).then(|| Probe::Table(t.clone()));
            (
                Source::Table(TableSource::new(t.clone(), cfg.train.seed)),
                probe,
            )
        }
        Data::Corpus { .. } => {
            let train_blocks = data.split(Split::Train)?;
            let probe = if d <= AUTO_EXACT_D {
                let held: Vec<_> = data
                    .split(Split::Heldout)?
                    .into_iter()
                    .take(CORPUS_PROBE_BLOCKS)
                    .collect();
                (!held.is_empty()).then_some(Probe::Sequences(held))
            } else {
                None
            };
            (
                Source::Corpus(CorpusSource::new(train_blocks, vocab, cfg.train.seed)?),
                probe,
            )
        }
    };
    let dir = output_dir(&cfg, "train")?;
    archive_config(&cfg, &dir)?;

    let (model, metrics, initial_loss, final_probe) = match cfg.model.backend {
        Backend::Tabular => {
            let o = fit(
                TabularModel::zeros(vocab, d)?,
                &mut source,
                &kernel,
                &cfg,
                probe.as_ref(),
                args.quiet,
            )?;
            (
                AnyModel::Tabular(o.model),
                o.metrics,
                o.initial_loss,
                o.final_probe,
            )
        }
        Backend::Neural => {
            let seed = cfg.model.init_seed.unwrap_or(cfg.train.seed);
            let init = NeuralModel::new(vocab, d, cfg.model.neural.clone(), seed)?;
            let o = fit(init, &mut source, &kernel, &cfg, probe.as_ref(), args.quiet)?;
            (
                AnyModel::Neural(o.model),
                o.metrics,
                o.initial_loss,
                o.final_probe,
            )
        }
        other => {
            return Err(CliError::Usage(format!(
                "backend {other:?} has no parameters to train"
            )))
        }
    };
    model.save(&dir.join("checkpoint.json"))?;
    trainer::write_metrics_csv(
        &metrics,
        BufWriter::new(File::create(dir.join("metrics.csv"))?),
    )?;

    let entropy = match &data {
        Data::Table(t) => Some(t.entropy()),
        Data::Corpus { .. } => None,
    };
    let summary = json!({
        "loss": cfg.train.loss,
        "backend": cfg.model.backend,
        "steps": cfg.train.steps,
        "initial_loss": initial_loss,
        "final_loss_mc": metrics.last().map(|r| r.loss_mc),
        "final_probe": final_probe,
        "data_entropy": entropy,
    });
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    match (final_probe, entropy) {
        (Some(p), Some(h)) => {
            println!(
                "final probe loss {p:.6} nats; data entropy {h:.6} nats; relative gap {:+.3}%",
                100.0 * (p - h) / h
            )
        }
        (Some(p), None) => println!("final probe loss {p:.6} nats"),
        _ => println!(
            "final training loss {:.6} nats",
            metrics.last().map_or(f64::NAN, |r| r.loss_mc)
        ),
    }
    println!(
        "checkpoint written to {}",
        dir.join("checkpoint.json").display()
    );
    Ok(())
}

enum Loaded {
    Trained(AnyModel),
    Oracle(OracleModel),
    Uniform(UniformModel),
}

impl Loaded {
    fn as_dyn(&self) -> &dyn ConditionalModel {
        match self {
            Loaded::Trained(m) => m.as_model(),
            Loaded::Oracle(m) => m,
            Loaded::Uniform(m) => m,
        }
    }
}

fn resolve_model(cfg: &RunConfig, data: Option<&Data>) -> Result<Loaded, CliError> {
    let model = match (&cfg.model.checkpoint, cfg.model.backend) {
        (Some(path), _) => {
            if !path.exists() {
                return Err(CliError::Usage(format!(
                    "checkpoint {} does not exist",
                    path.display()
                )));
            }
            Loaded::Trained(AnyModel::load(path)?)
        }
        (None, Backend::Oracle) => match data {
            Some(Data::Table(t)) => Loaded::Oracle(OracleModel::new(t.clone())),
            _ => {
                return Err(CliError::Usage(
                    "the oracle backend needs table data".into(),
                ))
            }
        },
        (None, Backend::Uniform) => match data {
            Some(data) => Loaded::Uniform(UniformModel::new(data.vocab(), data.d())),
            None => {
                return Err(CliError::Usage(
                    "the uniform backend needs data to fix (N, d)".into(),
                ))
            }
        },
        (None, backend) => {
            return Err(CliError::Usage(format!(
                "the {backend:?} backend needs --checkpoint or model.checkpoint"
            )))
        }
    };
    if let Some(data) = data {
        let m = model.as_dyn();
        if m.vocab() != data.vocab() || m.seq_len() != data.d() {
            return Err(RaddError::Incompatible(format!(
                "model has N = {}, d = {} but data has N = {}, d = {}",
                m.vocab().n_tokens(),
                m.seq_len(),
                data.vocab().n_tokens(),
                data.d()
            ))
            .into());
        }
    }
    Ok(model)
}

fn nfe_row(
    report: &SampleReport,
    kernel: &ForwardKernel,
    grid: &StepGrid,
    d: usize,
) -> Result<NfeRow, CliError> {
    let analytic = if report.cache {
        enfe_analytic(kernel, grid, report.method, d)?
    } else {
        enfe_uncached(kernel, grid, report.method, d)?
    };
    Ok(NfeRow {
        n: grid.n(),
        l: d,
        method: report.method,
        cache: report.cache,
        enfe_analytic: analytic,
        nfe_mean: report.nfe_mean(),
        nfe_std: report.nfe_std(),
        trajectories: report.nfe.len(),
    })
}

pub fn sample(args: SampleArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&args.common)?;
    if let Some(v) = args.checkpoint {
        cfg.model.checkpoint = Some(v);
    }
    if let Some(v) = args.backend {
        cfg.model.backend = v.into();
    }
    if let Some(v) = args.method {
        cfg.sample.method = v;
    }
    if let Some(v) = args.steps {
        cfg.sample.steps = v;
    }
    if let Some(v) = args.cache {
        cfg.sample.cache = matches!(v, Switch::On);
    }
    if let Some(v) = args.seed {
        cfg.sample.seed = v;
    }
    if let Some(v) = args.trajectories {
        cfg.sample.trajectories = v;
    }
    let data = load_data(&cfg)?;
    let model = resolve_model(&cfg, data.as_ref())?;
    let m = model.as_dyn();
    let kernel = ForwardKernel::new(cfg.schedule, m.vocab());
    let grid = StepGrid::uniform(cfg.sample.steps, cfg.schedule.horizon())?;
    let spec = SamplerSpec {
        kernel,
        grid: grid.clone(),
        method: cfg.sample.method,
        cache: cfg.sample.cache,
        prompt: None,
    };
    let report = sample_many(m, &spec, cfg.sample.trajectories, cfg.sample.seed)?;

    let dir = output_dir(&cfg, "sample")?;
    archive_config(&cfg, &dir)?;
    let mut out = BufWriter::new(File::create(dir.join("samples.jsonl"))?);
    report.write_jsonl(m.vocab(), &mut out)?;
    out.flush()?;
    let row = nfe_row(&report, &kernel, &grid, m.seq_len())?;
    write_nfe_csv(
        &[row.clone()],
        BufWriter::new(File::create(dir.join("nfe.csv"))?),
    )?;

    println!(
        "{} sequences; mean NFE {:.3} (expected {:.3}); forced fills {}; clamp events {}",
        report.sequences.len(),
        row.nfe_mean,
        row.enfe_analytic,
        report.forced_fills,
        report.clamp_events
    );
    if m.vocab() == Vocab::bytes() {
        for s in report.sequences.iter().take(3) {
            println!("  {:?}", decode_bytes(s));
        }
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&args.common)?;
    if let Some(v) = args.checkpoint {
        cfg.model.checkpoint = Some(v);
    }
    if let Some(v) = args.backend {
        cfg.model.backend = v.into();
    }
    if let Some(v) = args.loss {
        cfg.eval.loss = v;
    }
    if let Some(draws) = args.draws {
        cfg.eval.estimator = Some(Estimator::Mc {
            draws,
            seed: args.seed.unwrap_or(0),
        });
    }
    if let Some(v) = args.max_examples {
        cfg.eval.max_examples = Some(v);
    }
    if let Some(v) = args.samples {
        cfg.eval.samples = Some(v);
    }
    if let Some(v) = args.seed {
        cfg.sample.seed = v;
    }
    let data = load_data(&cfg)?.ok_or_else(|| {
        CliError::Usage("eval needs data: set `data` or pass --table/--corpus".into())
    })?;
    let model = resolve_model(&cfg, Some(&data))?;
    let m = model.as_dyn();
    let kernel = ForwardKernel::new(cfg.schedule, m.vocab());
    let grid = StepGrid::uniform(cfg.sample.steps, cfg.schedule.horizon())?;
    let spec = SamplerSpec {
        kernel,
        grid,
        method: cfg.sample.method,
        cache: cfg.sample.cache,
        prompt: None,
    };

    let report = match &data {
        Data::Table(table) => {
            let mut report = match cfg.eval.estimator {
                None | Some(Estimator::Exact) => {
                    perplexity_under_table(m, table, &kernel, cfg.eval.loss)?
                }
                Some(est) => {
                    let all: Vec<SequenceState> = table
                        .states()
                        .filter(|(_, p)| *p > 0.0)
                        .map(|(x, _)| x)
                        .collect();
                    perplexity(m, &all, &kernel, cfg.eval.loss, est)?
                }
            };
            let samples = cfg.eval.samples.unwrap_or(50_000);
            if samples > 0 {
                let (tv, sampled) =
                    distribution_distance(m, &spec, table, samples, cfg.sample.seed)?;
                report.tv_distance = Some(tv);
                report.nfe_summary = Some(NfeSummary::from(&sampled));
            }
            report
        }
        Data::Corpus { .. } => {
            let mut held = data.split(Split::Heldout)?;
            if let Some(cap) = cfg.eval.max_examples {
                held.truncate(cap);
            }
            let estimator = cfg.eval.estimator.unwrap_or(if data.d() <= AUTO_EXACT_D {
                Estimator::Exact
            } else {
                Estimator::Mc { draws: 8, seed: 0 }
            });
            let mut report = perplexity(m, &held, &kernel, cfg.eval.loss, estimator)?;
            let samples = cfg.eval.samples.unwrap_or(64);
            if samples > 0 {
                let sampled = sample_many(m, &spec, samples, cfg.sample.seed)?;
                report.unigram_entropy_nats = Some(unigram_entropy(&sampled.sequences)?);
                report.nfe_summary = Some(NfeSummary::from(&sampled));
            }
            report
        }
    };
    let dir = output_dir(&cfg, "eval")?;
    archive_config(&cfg, &dir)?;
    let text = report.to_json()?;
    fs::write(dir.join("eval.json"), text.clone() + "\n")?;
    report.append_csv(&dir.join("eval.csv"))?;
    println!("{text}");
    Ok(())
}

pub fn enfe(args: EnfeArgs) -> Result<(), CliError> {
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if args.lengths.is_empty() || args.steps.is_empty() || args.trajectories == 0 {
        return Err(CliError::Usage(
            "need at least one length, one step count and one trajectory".into(),
        ));
    }
    let vocab = Vocab::new(2)?;
    let kernel = ForwardKernel::new(cfg.schedule, vocab);
    let mut rows = Vec::new();
    for &l in &args.lengths {
        // Unmasking decisions do not depend on the predictions, so any model gives the same NFE law.
        let model = UniformModel::new(vocab, l);
        for &n in &args.steps {
            let grid = StepGrid::uniform(n, cfg.schedule.horizon())?;
            for &method in &args.methods {
                let spec = SamplerSpec {
                    kernel,
                    grid: grid.clone(),
                    method,
                    cache: true,
                    prompt: None,
                };
                let report = sample_many(&model, &spec, args.trajectories, args.seed)?;
                rows.push(nfe_row(&report, &kernel, &grid, l)?);
            }
        }
    }
    match &args.out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            write_nfe_csv(&rows, BufWriter::new(File::create(path)?))?;
        }
        None => write_nfe_csv(&rows, std::io::stdout().lock())?,
    }
    Ok(())
}
