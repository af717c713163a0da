//! Optimization: AdamW with a linear warmup/decay schedule, single-task
//! training with resumable state, and the sequential continual-learning
//! runner. Only adapter factors are ever updated; base weights stay frozen.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::model::{AdapterTarget, Dataset, TinyModel};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Which penalty shapes the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    /// Plain low-rank adaptation: task loss only.
    Lora,
    /// Task loss plus lambda-weighted orthogonality penalty (from the model
    /// config's lambda and the adapters' direction pairs).
    Clora,
    /// Task loss plus an L2 penalty on the adapter factors.
    LoraL2,
}

impl std::fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMethod::Lora => "lora",
            TrainMethod::Clora => "clora",
            TrainMethod::LoraL2 => "lora_l2",
        })
    }
}

impl std::str::FromStr for TrainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<TrainMethod> {
        match s {
            "lora" => Ok(TrainMethod::Lora),
            "clora" => Ok(TrainMethod::Clora),
            "lora_l2" => Ok(TrainMethod::LoraL2),
            other => Err(Error::invalid_argument(format!(
                "unknown method '{other}' (expected lora, clora, or lora_l2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: TrainMethod,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    /// Decoupled weight decay on the adapter factors.
    #[serde(default)]
    pub weight_decay: f64,
    /// Strength of the L2 baseline penalty; 0 disables it. Only meaningful
    /// with `method = lora_l2`.
    #[serde(default)]
    pub l2_reg_weight: f64,
    pub seed: u64,
    /// Global-norm gradient clipping; absent = off.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid_argument(format!(
                "lr must be positive and finite, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_argument("batch_size must be at least 1".to_string()));
        }
        if self.epochs == 0 {
            return Err(Error::invalid_argument("epochs must be at least 1".to_string()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid_argument(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(self.l2_reg_weight >= 0.0 && self.l2_reg_weight.is_finite()) {
            return Err(Error::invalid_argument(format!(
                "l2_reg_weight must be nonnegative, got {}",
                self.l2_reg_weight
            )));
        }
        if self.method == TrainMethod::LoraL2 && self.l2_reg_weight == 0.0 {
            return Err(Error::invalid_argument(
                "method lora_l2 needs l2_reg_weight > 0".to_string(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid_argument(format!(
                    "grad_clip must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` over `warmup_steps`, then linear decay to 0 at
/// `total_steps`. Step 0 maps to 0.
pub fn lr_at(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::invalid_argument(format!(
            "step {step} exceeds total_steps {total_steps}"
        )));
    }
    if warmup_steps >= total_steps {
        return Err(Error::invalid_argument(format!(
            "warmup_steps {warmup_steps} must be below total_steps {total_steps}"
        )));
    }
    // Ratio-first so the result can never exceed base_lr: the ratio lies
    // in [0, 1] exactly, and multiplying by it rounds monotonically.
    if step <= warmup_steps {
        if warmup_steps == 0 {
            // No ramp configured; fall through to the decay branch below,
            // which gives base_lr at step 0.
        } else {
            return Ok(base_lr * (step as f64 / warmup_steps as f64));
        }
    }
    Ok(base_lr * ((total_steps - step) as f64 / (total_steps - warmup_steps) as f64))
}

/// First and second moment estimates for one parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
}

impl AdamState {
    pub fn zeros(rows: usize, cols: usize) -> AdamState {
        AdamState {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
        }
    }
}

/// Moment estimates for both factors of one adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSlots {
    pub a: AdamState,
    pub b: AdamState,
}

/// Optimizer state across all adapters plus the global step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub slots: BTreeMap<AdapterTarget, AdapterSlots>,
    pub step: u64,
}

impl OptimizerState {
    pub fn for_model(model: &TinyModel) -> OptimizerState {
        let slots = model
            .adapters()
            .map(|(t, ad)| {
                (
                    t,
                    AdapterSlots {
                        a: AdamState::zeros(ad.a.rows(), ad.a.cols()),
                        b: AdamState::zeros(ad.b.rows(), ad.b.cols()),
                    },
                )
            })
            .collect();
        OptimizerState { slots, step: 0 }
    }
}

/// One AdamW update on a single matrix: bias-corrected moments, then the
/// decoupled weight-decay shrink. `step` is 1-based.
pub fn adamw_update(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut AdamState,
    step: u64,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::invalid_argument(
            "parameter, gradient, and state shapes must agree".to_string(),
        ));
    }
    if step == 0 {
        return Err(Error::invalid_argument("step index is 1-based".to_string()));
    }
    let bc1 = 1.0 - BETA1.powi(step as i32);
    let bc2 = 1.0 - BETA2.powi(step as i32);
    for i in 0..param.rows() {
        for j in 0..param.cols() {
            let g = grad[(i, j)];
            let m = BETA1 * state.m[(i, j)] + (1.0 - BETA1) * g;
            let v = BETA2 * state.v[(i, j)] + (1.0 - BETA2) * g * g;
            state.m[(i, j)] = m;
            state.v[(i, j)] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            let p = param[(i, j)];
            param[(i, j)] = p - lr * m_hat / (v_hat.sqrt() + EPS) - lr * weight_decay * p;
        }
    }
    Ok(())
}

/// Everything mutable a training run carries besides the model itself;
/// checkpointable, so a run can stop after any epoch and resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub optimizer: OptimizerState,
    pub shuffle_rng: Rng,
    pub dropout_rng: Rng,
    pub completed_epochs: usize,
    pub epoch_losses: Vec<f64>,
}

impl TrainState {
    pub fn new(model: &TinyModel, config: &TrainConfig) -> TrainState {
        Self::with_rng(model, &Rng::new(config.seed))
    }

    /// Builds state from an explicit stream root (used by the continual
    /// runner to give every stage its own independent streams).
    pub fn with_rng(model: &TinyModel, root: &Rng) -> TrainState {
        TrainState {
            optimizer: OptimizerState::for_model(model),
            shuffle_rng: root.derive("shuffle"),
            dropout_rng: root.derive("dropout"),
            completed_epochs: 0,
            epoch_losses: Vec::new(),
        }
    }
}

/// Result of a (possibly resumed) training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean task loss of the last completed epoch.
    pub final_task_loss: f64,
    /// Mean task loss per epoch, from the first epoch of the run onward
    /// (across resumes).
    pub epoch_losses: Vec<f64>,
    /// Final orthogonality penalty per adapter that carries directions.
    pub final_orth: BTreeMap<AdapterTarget, f64>,
    pub steps: u64,
}

/// Trains to completion with fresh state.
pub fn train_task(
    model: &mut TinyModel,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let mut state = TrainState::new(model, config);
    train_task_resumable(model, data, config, &mut state, None)
}

/// Runs epochs `state.completed_epochs .. stop_after_epoch.unwrap_or(epochs)`
/// and updates `state` in place. Calling again with the same state finishes
/// the run exactly as an uninterrupted one would.
pub fn train_task_resumable(
    model: &mut TinyModel,
    data: &Dataset,
    config: &TrainConfig,
    state: &mut TrainState,
    stop_after_epoch: Option<usize>,
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid_argument("dataset must not be empty".to_string()));
    }
    if config.method == TrainMethod::Clora {
        let missing = model
            .adapters()
            .any(|(_, ad)| ad.reg.is_none());
        if missing {
            return Err(Error::invalid_argument(
                "method clora needs a direction pair on every adapter".to_string(),
            ));
        }
    }

    let n = data.len();
    let steps_per_epoch = n.div_ceil(config.batch_size) as u64;
    let total_steps = steps_per_epoch * config.epochs as u64;
    if config.warmup_steps as u64 >= total_steps {
        return Err(Error::invalid_argument(format!(
            "warmup_steps {} must be below total steps {total_steps}",
            config.warmup_steps
        )));
    }
    let end_epoch = stop_after_epoch.unwrap_or(config.epochs).min(config.epochs);

    let use_dropout = model.config.dropout > 0.0;
    for _epoch in state.completed_epochs..end_epoch {
        let mut order: Vec<usize> = (0..n).collect();
        state.shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = data.subset(chunk)?;
            let step = state.optimizer.step + 1;
            let dropout = use_dropout.then_some(&mut state.dropout_rng);
            let (parts, mut grads) = model
                .loss_and_grads(&batch, dropout)
                .map_err(|e| training_error(step, e))?;
            loss_sum += parts.task * chunk.len() as f64;

            if config.method == TrainMethod::LoraL2 && config.l2_reg_weight > 0.0 {
                // d/dθ of w·Σ|θ|² is 2wθ on each factor.
                for (target, (ga, gb)) in grads.iter_mut() {
                    let ad = model.adapter_at(*target).expect("grads only for adapters");
                    ga.add_scaled_inplace(&ad.a, 2.0 * config.l2_reg_weight)?;
                    gb.add_scaled_inplace(&ad.b, 2.0 * config.l2_reg_weight)?;
                }
            }
            if let Some(limit) = config.grad_clip {
                clip_global_norm(&mut grads, limit);
            }
            for (_, (ga, gb)) in grads.iter() {
                if !ga.all_finite() || !gb.all_finite() {
                    return Err(Error::Training {
                        step,
                        message: "non-finite gradient".to_string(),
                    });
                }
            }

            let lr = lr_at(step, total_steps, config.warmup_steps as u64, config.lr)?;
            for (target, (ga, gb)) in &grads {
                let slots = state
                    .optimizer
                    .slots
                    .get_mut(target)
                    .expect("state built for this model");
                let ad = model.adapter_at_mut(*target).expect("adapter exists");
                adamw_update(&mut ad.a, ga, &mut slots.a, step, lr, config.weight_decay)?;
                adamw_update(&mut ad.b, gb, &mut slots.b, step, lr, config.weight_decay)?;
                if !ad.a.all_finite() || !ad.b.all_finite() {
                    return Err(Error::Training {
                        step,
                        message: "non-finite parameter after update".to_string(),
                    });
                }
            }
            state.optimizer.step = step;
        }
        state.epoch_losses.push(loss_sum / n as f64);
        state.completed_epochs += 1;
    }

    let mut final_orth = BTreeMap::new();
    for (target, ad) in model.adapters() {
        if ad.reg.is_some() {
            final_orth.insert(target, ad.clora_reg_loss()?);
        }
    }
    Ok(TrainReport {
        final_task_loss: state.epoch_losses.last().copied().unwrap_or(f64::NAN),
        epoch_losses: state.epoch_losses.clone(),
        final_orth,
        steps: state.optimizer.step,
    })
}

fn training_error(step: u64, e: Error) -> Error {
    match e {
        Error::InvalidState(message) => Error::Training { step, message },
        other => other,
    }
}

fn clip_global_norm(grads: &mut BTreeMap<AdapterTarget, (Matrix, Matrix)>, limit: f64) {
    let mut sq = 0.0;
    for (_, (ga, gb)) in grads.iter() {
        sq += ga.data().iter().map(|x| x * x).sum::<f64>();
        sq += gb.data().iter().map(|x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > limit {
        let s = limit / norm;
        for (_, (ga, gb)) in grads.iter_mut() {
            *ga = ga.scale(s);
            *gb = gb.scale(s);
        }
    }
}

/// Accuracy matrix from sequential training: `acc[i][j]` is accuracy on
/// test set `j` after finishing stage `i` (j ≤ i).
#[derive(Debug, Clone, PartialEq)]
pub struct CLReport {
    pub acc: Vec<Vec<f64>>,
    /// Mean accuracy over all tasks after the final stage.
    pub average_final: f64,
}

/// Trains the stages of `tasks` in order on the shared adapter parameters
/// (fresh optimizer and schedule per stage), evaluating all earlier test
/// sets after each stage.
pub fn run_continual(
    model: &mut TinyModel,
    tasks: &[(Dataset, Dataset)],
    config: &TrainConfig,
) -> Result<CLReport> {
    if tasks.len() < 2 {
        return Err(Error::invalid_argument(
            "continual learning needs at least 2 tasks".to_string(),
        ));
    }
    let root = Rng::new(config.seed);
    let mut acc = Vec::with_capacity(tasks.len());
    for (i, (train_split, _)) in tasks.iter().enumerate() {
        let stage_root = root.derive_indexed("stage", i as u64);
        let mut state = TrainState::with_rng(model, &stage_root);
        train_task_resumable(model, train_split, config, &mut state, None)?;
        let mut row = Vec::with_capacity(i + 1);
        for (_, test_split) in &tasks[..=i] {
            row.push(model.evaluate_accuracy(test_split)?);
        }
        acc.push(row);
    }
    let last = acc.last().expect("at least two stages");
    let average_final = last.iter().sum::<f64>() / last.len() as f64;
    Ok(CLReport { acc, average_final })
}
