//! Run configuration files.

use std::path::{Path, PathBuf};

use radd::eval::Estimator;
use radd::model::NeuralConfig;
use radd::trainer::TrainConfig;
use radd::{Backend, LossKind, NoiseSchedule, SamplingMethod};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub schedule: NoiseSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// An explicit joint table; training draws i.i.d. from it.
    Table { path: PathBuf },
    /// A byte file cut into length-`d` blocks.
    Corpus {
        path: PathBuf,
        d: usize,
        #[serde(default = "default_heldout")]
        heldout_fraction: f64,
    },
}

fn default_heldout() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_backend")]
    pub backend: Backend,
    #[serde(default)]
    pub neural: NeuralConfig,
    /// Seed for the neural initialization; defaults to the training seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
    /// Parameters to load for `sample` and `eval`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

fn default_backend() -> Backend {
    Backend::Tabular
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backend: default_backend(),
            neural: NeuralConfig::default(),
            init_seed: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    #[serde(default = "default_method")]
    pub method: SamplingMethod,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_true")]
    pub cache: bool,
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_method() -> SamplingMethod {
    SamplingMethod::Tweedie
}

fn default_steps() -> usize {
    128
}

fn default_true() -> bool {
    true
}

fn default_trajectories() -> usize {
    16
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            method: default_method(),
            steps: default_steps(),
            cache: true,
            trajectories: default_trajectories(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_eval_loss")]
    pub loss: LossKind,
    /// Exact when `d` is small enough to enumerate masks, else 8 Monte-Carlo draws.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<Estimator>,
    /// Cap on held-out blocks evaluated (corpus data).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_examples: Option<usize>,
    /// Generated sequences for total variation (table data, default 50000) or
    /// unigram entropy (corpus data, default 64); 0 skips.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
}

fn default_eval_loss() -> LossKind {
    LossKind::Ao
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            loss: default_eval_loss(),
            estimator: None,
            max_examples: None,
            samples: None,
        }
    }
}

impl RunConfig {
    /// Parses `path`; relative paths inside resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut cfg =
            Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            format!("invalid config at `{path}`: {}", e.inner())
        })
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            Some(DataConfig::Table { path }) | Some(DataConfig::Corpus { path, .. }) => fix(path),
            None => {}
        }
        if let Some(p) = &mut self.model.checkpoint {
            fix(p);
        }
        if let Some(p) = &mut self.output_dir {
            fix(p);
        }
    }
}
