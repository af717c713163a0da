//! Runnable surface of the laboratory: experiment configuration, synthetic
//! task generation, checkpoint persistence, CSV reporting, and the
//! orchestration helpers the command-line binary calls into.

pub mod checkpoint;
pub mod csv;
pub mod tasks;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Rng;
use crate::metrics::{self, MetricsRecord, SweepRow};
use crate::model::{Dataset, RegConfig, TinyModel};
use crate::trainer::{
    run_continual, train_task_resumable, CLReport, TrainMethod, TrainReport, TrainState,
};
use crate::adapter::RegVariant;

pub use tasks::{generate_tasks, SyntheticTaskSpec, TaskKind};

/// Everything needed to reproduce a run, as one structured text (TOML)
/// file: model, training, task, and experiment-layout settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: crate::model::TinyModelConfig,
    pub train: crate::trainer::TrainConfig,
    pub task: SyntheticTaskSpec,
    /// Where checkpoints and CSV reports are written.
    pub output_dir: String,
    #[serde(default)]
    pub continual: ContinualSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinualSection {
    pub num_tasks: usize,
}

impl Default for ContinualSection {
    fn default() -> Self {
        ContinualSection { num_tasks: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    /// Direction counts to sweep; 0 means the unregularized baseline row.
    pub k_values: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            k_values: vec![4, 8, 16, 32],
            seeds: vec![1, 2, 3],
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    /// Training/init seed (task data keeps its own seed).
    pub seed: Option<u64>,
    /// Penalized direction count; 0 removes the penalty configuration.
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub rank: Option<usize>,
    pub method: Option<TrainMethod>,
    pub out: Option<String>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("bad config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("unserializable config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        if self.output_dir.is_empty() {
            return Err(Error::config("output_dir must not be empty".to_string()));
        }
        if self.continual.num_tasks < 1 {
            return Err(Error::config("continual.num_tasks must be >= 1".to_string()));
        }
        if self.sweep.k_values.is_empty() || self.sweep.seeds.is_empty() {
            return Err(Error::config("sweep needs k_values and seeds".to_string()));
        }
        if self.train.method == TrainMethod::Clora && self.model.reg.is_none() {
            return Err(Error::config(
                "method clora needs a [model.reg] section".to_string(),
            ));
        }
        if self.train.method != TrainMethod::Clora && self.model.lambda != 0.0 {
            return Err(Error::config(
                "nonzero lambda without method clora is ambiguous; set lambda = 0".to_string(),
            ));
        }
        Ok(())
    }

    /// FNV-1a over the canonical serialized form; checkpoints carry it so a
    /// state file cannot silently load under a different configuration.
    pub fn hash(&self) -> Result<u64> {
        Ok(fnv1a(self.to_toml_string()?.as_bytes()))
    }

    /// Applies flag overrides. Method switches away from the penalty also
    /// zero lambda so the resulting config stays self-consistent.
    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(rank) = o.rank {
            self.model.rank = rank;
        }
        if let Some(lambda) = o.lambda {
            self.model.lambda = lambda;
        }
        if let Some(k) = o.k {
            if k == 0 {
                self.model.reg = None;
                if self.train.method == TrainMethod::Clora {
                    self.train.method = TrainMethod::Lora;
                    self.model.lambda = 0.0;
                }
            } else {
                match &mut self.model.reg {
                    Some(reg) => reg.k = k,
                    None => {
                        self.model.reg = Some(RegConfig {
                            variant: RegVariant::Random,
                            k,
                        })
                    }
                }
            }
        }
        if let Some(method) = o.method {
            self.train.method = method;
            if method != TrainMethod::Clora {
                self.model.lambda = 0.0;
            }
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
    }

    /// k/rank/lambda/seed identification columns for report rows.
    pub fn run_label(&self) -> csv::RunLabel {
        csv::RunLabel {
            method: self.train.method.to_string(),
            k: self.model.reg.as_ref().map(|r| r.k).unwrap_or(0),
            rank: self.model.rank,
            lambda: self.model.lambda,
            seed: self.train.seed,
        }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Concurrency cap for fan-out work, from `CLORA_LAB_THREADS`; defaults to
/// the machine's available parallelism (at most 8) when unset.
pub fn thread_cap() -> Result<usize> {
    match std::env::var("CLORA_LAB_THREADS") {
        Ok(raw) => {
            let n: usize = raw
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("CLORA_LAB_THREADS must be a positive integer, got {raw:?}")))?;
            if n == 0 {
                return Err(Error::config("CLORA_LAB_THREADS must be at least 1".to_string()));
            }
            Ok(n)
        }
        Err(std::env::VarError::NotPresent) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
            .min(8)),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(Error::config("CLORA_LAB_THREADS is not valid unicode".to_string()))
        }
    }
}

/// A finished (or partially finished) single-task training run.
pub struct TrainOutcome {
    pub model: TinyModel,
    pub state: TrainState,
    pub report: TrainReport,
}

/// Trains on the config's task. `resume_from` continues from a checkpoint;
/// `stop_after_epoch` ends the run early (0 = initialize only), which is
/// how mid-run checkpoints for resume tests are produced.
pub fn run_train(
    config: &ExperimentConfig,
    stop_after_epoch: Option<usize>,
    resume_from: Option<&std::path::Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_data, _) = single_task(config)?;
    let (mut model, mut state) = match resume_from {
        Some(path) => checkpoint::load_checkpoint(path, config)?,
        None => {
            let model = TinyModel::init(config.model.clone(), &Rng::new(config.train.seed))?;
            let state = TrainState::new(&model, &config.train);
            (model, state)
        }
    };
    let report = train_task_resumable(&mut model, &train_data, &config.train, &mut state, stop_after_epoch)?;
    Ok(TrainOutcome { model, state, report })
}

/// Capacity/forgetting measurement of a trained model on up to 100
/// held-out samples of the config's task.
pub fn run_measure(config: &ExperimentConfig, model: &TinyModel) -> Result<MetricsRecord> {
    let (_, test_data) = single_task(config)?;
    let count = test_data.len().min(100);
    let idx: Vec<usize> = (0..count).collect();
    metrics::measure(model, &test_data.subset(&idx)?)
}

/// Sequential training over the configured task sequence.
pub fn run_continual_experiment(config: &ExperimentConfig) -> Result<CLReport> {
    config.validate()?;
    let tasks = generate_tasks(&config.task, config.continual.num_tasks)?;
    let mut model = TinyModel::init(config.model.clone(), &Rng::new(config.train.seed))?;
    run_continual(&mut model, &tasks, &config.train)
}

/// Trains one model per (k, seed) of the sweep section and returns
/// seed-averaged rows, fanning out up to `thread_cap()` runs at once.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let (train_data, test_data) = single_task(config)?;
    metrics::sweep_k(
        &config.model,
        &config.train,
        &train_data,
        &test_data,
        &config.sweep.k_values,
        &config.sweep.seeds,
        thread_cap()?,
    )
}

fn single_task(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let mut tasks = generate_tasks(&config.task, 1)?;
    Ok(tasks.remove(0))
}
