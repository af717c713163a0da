//! Browser-facing exports for the adapter laboratory.
//!
//! Three operations, each returning a JSON string the static page plots
//! directly. Everything runs single-threaded and deterministically from the
//! caller's seed, so the page shows the same curves on every load.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use clora_core::adapter::RegVariant;
use clora_core::harness::{generate_tasks, SyntheticTaskSpec, TaskKind};
use clora_core::linalg::Rng;
use clora_core::metrics::{measure, sweep_k};
use clora_core::model::{AdapterTarget, ModelShape, RegConfig, TinyModel, TinyModelConfig};
use clora_core::trainer::{run_continual, train_task, TrainConfig, TrainMethod};

fn model_config(k: usize, lambda: f64, rank: usize) -> TinyModelConfig {
    TinyModelConfig {
        shape: ModelShape::Mlp {
            input_dim: 8,
            hidden_dim: 12,
            num_classes: 2,
        },
        adapter_targets: vec![AdapterTarget::MlpUp],
        rank,
        alpha: 2.0 * rank as f64,
        lambda: if k == 0 { 0.0 } else { lambda },
        adapter_init_std: 0.15,
        reg: (k > 0).then_some(RegConfig {
            variant: RegVariant::Random,
            k,
        }),
        dropout: 0.0,
    }
}

fn task_spec() -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        kind: TaskKind::RotatedFeatures,
        dims: 8,
        num_classes: 2,
        train_samples: 64,
        test_samples: 48,
        task_seed: 42,
        displacement: 4.0,
        rotation_angle: 0.7,
        seq_len: 0,
    }
}

fn train_config(method: TrainMethod, seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        method,
        lr: 0.02,
        batch_size: 16,
        epochs,
        warmup_steps: 3,
        weight_decay: 0.0,
        l2_reg_weight: if method == TrainMethod::LoraL2 { 1e-2 } else { 0.0 },
        seed,
        grad_clip: None,
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct TrainDemo {
    epoch_losses: Vec<f64>,
    accuracy: f64,
    capacity: f64,
    forgetting: f64,
    reference_forgetting: f64,
    final_orth: f64,
}

/// Trains one adapter on the demo task and reports the loss curve plus the
/// capacity/forgetting measurement. `k = 0` disables the penalty.
#[wasm_bindgen]
pub fn train_demo(seed: u32, lambda: f64, k: u32, epochs: u32) -> Result<String, String> {
    let run = || -> clora_core::Result<TrainDemo> {
        let epochs = (epochs as usize).clamp(1, 200);
        let method = if k > 0 { TrainMethod::Clora } else { TrainMethod::Lora };
        let cfg = model_config(k as usize, lambda, 4);
        let tc = train_config(method, seed as u64, epochs);
        let tasks = generate_tasks(&task_spec(), 1)?;
        let (train, test) = &tasks[0];
        let mut model = TinyModel::init(cfg, &Rng::new(seed as u64))?;
        let report = train_task(&mut model, train, &tc)?;
        let record = measure(&model, test)?;
        Ok(TrainDemo {
            epoch_losses: report.epoch_losses,
            accuracy: model.evaluate_accuracy(test)?,
            capacity: record.model_capacity,
            forgetting: record.model_forgetting,
            reference_forgetting: record.reference_forgetting,
            final_orth: report.final_orth.values().sum(),
        })
    };
    to_json(&run().map_err(|e| e.to_string())?)
}

#[derive(Serialize)]
struct TradeoffRow {
    k: usize,
    capacity: f64,
    forgetting: f64,
}

/// Sweeps the penalized-direction count and returns the seed-averaged
/// capacity/forgetting pairs, for the trade-off chart. `k_values` is a
/// comma-separated ascending list; 0 means "no penalty".
#[wasm_bindgen]
pub fn tradeoff_demo(k_values: String, lambda: f64, epochs: u32) -> Result<String, String> {
    let run = || -> clora_core::Result<Vec<TradeoffRow>> {
        let ks: Vec<usize> = k_values
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| clora_core::Error::invalid_argument(format!("bad k value {s:?}")))
            })
            .collect::<clora_core::Result<_>>()?;
        let epochs = (epochs as usize).clamp(1, 100);
        let cfg = model_config(ks.iter().copied().max().unwrap_or(1).max(1), lambda, 4);
        let tc = train_config(TrainMethod::Clora, 1, epochs);
        let tasks = generate_tasks(&task_spec(), 1)?;
        let (train, test) = &tasks[0];
        let rows = sweep_k(&cfg, &tc, train, test, &ks, &[1, 2], 1)?;
        Ok(rows
            .into_iter()
            .map(|r| TradeoffRow { k: r.k, capacity: r.capacity, forgetting: r.forgetting })
            .collect())
    };
    to_json(&run().map_err(|e| e.to_string())?)
}

#[derive(Serialize)]
struct ContinualDemo {
    acc: Vec<Vec<f64>>,
    average_final: f64,
}

/// Trains a task sequence with the chosen method and returns the accuracy
/// matrix: `acc[i][j]` is accuracy on task j after finishing stage i.
#[wasm_bindgen]
pub fn continual_demo(method: String, k: u32, lambda: f64, stages: u32) -> Result<String, String> {
    let run = || -> clora_core::Result<ContinualDemo> {
        let method: TrainMethod = method.parse()?;
        let stages = (stages as usize).clamp(2, 6);
        let k = if method == TrainMethod::Clora { (k as usize).max(1) } else { 0 };
        let cfg = model_config(k, lambda, 4);
        let tc = train_config(method, 5, 12);
        let tasks = generate_tasks(&task_spec(), stages)?;
        let mut model = TinyModel::init(cfg, &Rng::new(5))?;
        let report = run_continual(&mut model, &tasks, &tc)?;
        Ok(ContinualDemo { acc: report.acc, average_final: report.average_final })
    };
    to_json(&run().map_err(|e| e.to_string())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn train_demo_returns_losses_and_measurements() {
        let json = train_demo(3, 1.0, 4, 10).unwrap();
        let v: Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["epoch_losses"].as_array().unwrap().len(), 10);
        assert!(v["capacity"].as_f64().unwrap() > 0.0);
        assert!(v["forgetting"].as_f64().unwrap() > 0.0);
        assert!(v["accuracy"].as_f64().unwrap() > 0.5);
    }

    #[test]
    fn train_demo_without_penalty_runs_plain() {
        let json = train_demo(3, 1.0, 0, 5).unwrap();
        let v: Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["final_orth"].as_f64().unwrap(), 0.0);
    }

    #[test]
    fn tradeoff_rows_follow_requested_ks() {
        let json = tradeoff_demo("2,4,8".to_string(), 1.0, 6).unwrap();
        let v: Value = serde_json::from_str(&json).unwrap();
        let rows = v.as_array().unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0]["k"], 2);
        assert_eq!(rows[2]["k"], 8);
        for r in rows {
            assert!(r["forgetting"].as_f64().unwrap() >= 0.0);
        }
    }

    #[test]
    fn continual_matrix_is_lower_triangular() {
        let json = continual_demo("clora".to_string(), 6, 1.0, 3).unwrap();
        let v: Value = serde_json::from_str(&json).unwrap();
        let acc = v["acc"].as_array().unwrap();
        assert_eq!(acc.len(), 3);
        for (i, row) in acc.iter().enumerate() {
            assert_eq!(row.as_array().unwrap().len(), i + 1);
        }
    }

    #[test]
    fn bad_inputs_surface_as_errors() {
        assert!(tradeoff_demo("4,oops".to_string(), 1.0, 5).is_err());
        assert!(continual_demo("bogus".to_string(), 4, 1.0, 3).is_err());
    }

    #[test]
    fn outputs_are_deterministic() {
        let a = train_demo(7, 0.5, 2, 4).unwrap();
        let b = train_demo(7, 0.5, 2, 4).unwrap();
        assert_eq!(a, b);
    }
}
