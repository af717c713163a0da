//! Capacity and forgetting measurement.
//!
//! Capacity of an adapter is the spectral norm of its effective update ΔW —
//! how much the update *can* move an output. Forgetting is the mean of
//! ‖ΔW·x‖/‖x‖ over activations x actually seen at that layer — how much the
//! update *does* move outputs on real inputs. The reference values run the
//! same computations on the frozen base weights to show the scale a full
//! update would have.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, vec_norm, Matrix, Rng};
use crate::model::{AdapterTarget, Dataset, TinyModel, TinyModelConfig};
use crate::trainer::{train_task, TrainConfig, TrainMethod};

/// Convergence settings for the spectral-norm estimates used here; tight
/// enough that the operator-norm bound F ≤ σ·(1+1e-8) holds per input.
const SPECTRAL_TOL: f64 = 1e-12;
const SPECTRAL_ITERS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterMetrics {
    /// σ_max of the effective update ΔW.
    pub capacity: f64,
    /// Mean of ‖ΔW·x‖/‖x‖ over collected nonzero inputs.
    pub forgetting: f64,
    /// Number of inputs that entered the mean.
    pub inputs_used: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub per_adapter: BTreeMap<AdapterTarget, AdapterMetrics>,
    /// Unweighted mean of per-adapter capacities.
    pub model_capacity: f64,
    /// Unweighted mean of per-adapter forgetting values.
    pub model_forgetting: f64,
    /// Same forgetting computation with the frozen base W instead of ΔW.
    pub reference_forgetting: f64,
    /// Mean σ_max of the frozen base weights at adapter sites.
    pub reference_capacity: f64,
    /// Adapter sites that yielded no usable inputs (flagged, not averaged).
    pub skipped: Vec<AdapterTarget>,
}

/// Relative output change `‖ΔW·x‖ / ‖x‖`. Returns `None` for `x = 0`,
/// where the measure is undefined — callers skip such inputs.
pub fn forgetting_of(delta_w: &Matrix, x: &[f64]) -> Result<Option<f64>> {
    let norm = vec_norm(x);
    if norm == 0.0 {
        return Ok(None);
    }
    let out = delta_w.matvec(x)?;
    Ok(Some(vec_norm(&out) / norm))
}

/// Runs `samples` through the model, collecting the activation entering
/// every adapter site, and aggregates capacity/forgetting per adapter.
pub fn measure(model: &TinyModel, samples: &Dataset) -> Result<MetricsRecord> {
    let collected = model.collect_layer_inputs(samples)?;
    let mut per_adapter = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut ref_sum = 0.0;
    let mut ref_cap_sum = 0.0;
    let mut ref_count = 0usize;

    for (target, adapter) in model.adapters() {
        let inputs = collected.get(&target).map(Vec::as_slice).unwrap_or(&[]);
        let delta = adapter.delta();
        let mut sum = 0.0;
        let mut used = 0usize;
        let mut ref_adapter_sum = 0.0;
        for x in inputs {
            if let Some(f) = forgetting_of(&delta, x)? {
                sum += f;
                used += 1;
                let wx = adapter.w.matvec(x)?;
                ref_adapter_sum += vec_norm(&wx) / vec_norm(x);
            }
        }
        if used == 0 {
            skipped.push(target);
            continue;
        }
        let capacity = spectral_norm(&delta, SPECTRAL_TOL, SPECTRAL_ITERS)?;
        per_adapter.insert(
            target,
            AdapterMetrics {
                capacity,
                forgetting: sum / used as f64,
                inputs_used: used,
            },
        );
        ref_sum += ref_adapter_sum / used as f64;
        ref_cap_sum += spectral_norm(&adapter.w, SPECTRAL_TOL, SPECTRAL_ITERS)?;
        ref_count += 1;
    }

    if per_adapter.is_empty() {
        return Err(Error::invalid_state(
            "no adapter site produced usable inputs".to_string(),
        ));
    }
    let n = per_adapter.len() as f64;
    Ok(MetricsRecord {
        model_capacity: per_adapter.values().map(|m| m.capacity).sum::<f64>() / n,
        model_forgetting: per_adapter.values().map(|m| m.forgetting).sum::<f64>() / n,
        reference_forgetting: ref_sum / ref_count as f64,
        reference_capacity: ref_cap_sum / ref_count as f64,
        per_adapter,
        skipped,
    })
}

/// Seed-averaged capacity and forgetting for one k value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    /// Number of penalized directions; 0 means no regularization at all
    /// (the plain baseline row).
    pub k: usize,
    pub capacity: f64,
    pub forgetting: f64,
}

/// Trains one model per (k, seed) on `train_data`, measures each on up to
/// 100 held-out samples from `test_data`, and returns seed-averaged rows in
/// the order of `k_values`. `threads` caps concurrent runs (1 = serial);
/// results are deterministic regardless of the cap.
pub fn sweep_k(
    model_cfg: &TinyModelConfig,
    train_cfg: &TrainConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    k_values: &[usize],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<SweepRow>> {
    if k_values.is_empty() || seeds.is_empty() {
        return Err(Error::invalid_argument(
            "need at least one k value and one seed".to_string(),
        ));
    }
    if k_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid_argument(
            "k values must be strictly ascending".to_string(),
        ));
    }

    let mut jobs = Vec::new();
    for &k in k_values {
        for &seed in seeds {
            jobs.push((k, seed));
        }
    }
    let results = run_jobs(
        &jobs,
        threads,
        |&(k, seed)| -> Result<(f64, f64)> {
            let record = train_and_measure(
                model_cfg, train_cfg, train_data, test_data, k, seed,
            )?;
            Ok((record.model_capacity, record.model_forgetting))
        },
    )?;

    let mut rows = Vec::with_capacity(k_values.len());
    for (ki, &k) in k_values.iter().enumerate() {
        let slice = &results[ki * seeds.len()..(ki + 1) * seeds.len()];
        let n = slice.len() as f64;
        rows.push(SweepRow {
            k,
            capacity: slice.iter().map(|r| r.0).sum::<f64>() / n,
            forgetting: slice.iter().map(|r| r.1).sum::<f64>() / n,
        });
    }
    Ok(rows)
}

/// One sweep cell: build (with the given k), train, measure.
pub fn train_and_measure(
    model_cfg: &TinyModelConfig,
    train_cfg: &TrainConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    k: usize,
    seed: u64,
) -> Result<MetricsRecord> {
    let mut cfg = model_cfg.clone();
    let mut tc = train_cfg.clone();
    tc.seed = seed;
    if k == 0 {
        cfg.reg = None;
        if tc.method == TrainMethod::Clora {
            tc.method = TrainMethod::Lora;
        }
    } else if let Some(reg) = &mut cfg.reg {
        reg.k = k;
    } else {
        return Err(Error::invalid_argument(
            "sweep over k > 0 needs a regularization config in the template".to_string(),
        ));
    }
    let mut model = TinyModel::init(cfg, &Rng::new(seed))?;
    train_task(&mut model, train_data, &tc)?;
    let count = test_data.len().min(100);
    let sample_idx: Vec<usize> = (0..count).collect();
    let samples = test_data.subset(&sample_idx)?;
    measure(&model, &samples)
}

/// Runs `f` over `jobs` with at most `threads` concurrent workers,
/// preserving job order in the results.
fn run_jobs<J: Sync, R: Send>(
    jobs: &[J],
    threads: usize,
    f: impl Fn(&J) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if threads <= 1 || jobs.len() <= 1 {
        return jobs.iter().map(&f).collect();
    }
    let mut out: Vec<Option<Result<R>>> = (0..jobs.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut out);
    std::thread::scope(|scope| {
        for _ in 0..threads.min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    out.into_iter()
        .map(|slot| slot.expect("every job ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::RegVariant;
    use crate::linalg::{gaussian_matrix, orthonormal_init};
    use crate::model::{ModelShape, RegConfig};

    fn ident2() -> Matrix {
        Matrix::identity(2)
    }

    #[test]
    fn forgetting_of_isometry_is_one() {
        let f = forgetting_of(&ident2(), &[3.0, 4.0]).unwrap().unwrap();
        assert_eq!(f, 1.0);
    }

    #[test]
    fn forgetting_scales_with_the_update() {
        let f = forgetting_of(&ident2().scale(2.0), &[1.0, -1.0]).unwrap().unwrap();
        assert!((f - 2.0).abs() < 1e-15);
    }

    #[test]
    fn forgetting_of_null_space_input_is_zero() {
        let mut d = Matrix::zeros(2, 2);
        d[(0, 0)] = 1.0;
        let f = forgetting_of(&d, &[0.0, 5.0]).unwrap().unwrap();
        assert_eq!(f, 0.0);
    }

    #[test]
    fn zero_input_is_skipped() {
        assert!(forgetting_of(&ident2(), &[0.0, 0.0]).unwrap().is_none());
    }

    fn mlp_model(seed: u64) -> TinyModel {
        let cfg = TinyModelConfig {
            shape: ModelShape::Mlp {
                input_dim: 4,
                hidden_dim: 6,
                num_classes: 3,
            },
            adapter_targets: vec![AdapterTarget::MlpUp, AdapterTarget::MlpDown],
            rank: 2,
            alpha: 4.0,
            lambda: 0.0,
            adapter_init_std: 0.2,
            reg: None,
            dropout: 0.0,
        };
        TinyModel::init(cfg, &Rng::new(seed)).unwrap()
    }

    fn class_samples(n: usize, seed: u64) -> Dataset {
        let inputs = gaussian_matrix(4, n, 1.0, &mut Rng::new(seed)).unwrap();
        Dataset::classification(inputs, (0..n).map(|i| i % 3).collect()).unwrap()
    }

    #[test]
    fn fresh_model_measures_all_zero() {
        let model = mlp_model(1);
        let record = measure(&model, &class_samples(10, 2)).unwrap();
        for (t, m) in &record.per_adapter {
            assert_eq!(m.capacity, 0.0, "{t} capacity");
            assert_eq!(m.forgetting, 0.0, "{t} forgetting");
        }
        assert_eq!(record.model_capacity, 0.0);
        assert_eq!(record.model_forgetting, 0.0);
        assert!(record.reference_forgetting > 0.0, "base weights are nonzero");
    }

    #[test]
    fn hand_set_adapter_matches_direct_computation() {
        let mut model = mlp_model(3);
        for t in [AdapterTarget::MlpUp, AdapterTarget::MlpDown] {
            let ad = model.adapter_at_mut(t).unwrap();
            ad.b = gaussian_matrix(ad.b.rows(), ad.b.cols(), 0.5, &mut Rng::new(4)).unwrap();
        }
        let samples = class_samples(3, 5);
        let record = measure(&model, &samples).unwrap();

        // Direct oracle for the up projection: its inputs are the raw
        // sample columns.
        let ad = model.adapter_at(AdapterTarget::MlpUp).unwrap();
        let delta = ad.delta();
        let inputs = match &samples {
            Dataset::Classification { inputs, .. } => inputs,
            _ => unreachable!(),
        };
        let mut sum = 0.0;
        for j in 0..3 {
            let x = inputs.column(j);
            sum += vec_norm(&delta.matvec(&x).unwrap()) / vec_norm(&x);
        }
        let got = record.per_adapter[&AdapterTarget::MlpUp].forgetting;
        assert!((got - sum / 3.0).abs() < 1e-12, "{got} vs {}", sum / 3.0);
        assert_eq!(record.per_adapter[&AdapterTarget::MlpUp].inputs_used, 3);
    }

    #[test]
    fn orthogonal_base_gives_unit_reference() {
        // Make the only adapter site's base weight orthonormal; every
        // reference ratio ‖Wx‖/‖x‖ is then exactly 1.
        let cfg = TinyModelConfig {
            shape: ModelShape::Mlp {
                input_dim: 4,
                hidden_dim: 4,
                num_classes: 3,
            },
            adapter_targets: vec![AdapterTarget::MlpUp],
            rank: 2,
            alpha: 4.0,
            lambda: 0.0,
            adapter_init_std: 0.2,
            reg: None,
            dropout: 0.0,
        };
        let mut model = TinyModel::init(cfg, &Rng::new(6)).unwrap();
        let q = orthonormal_init(4, 4, &mut Rng::new(7)).unwrap();
        let ad = model.adapter_at_mut(AdapterTarget::MlpUp).unwrap();
        ad.w = q;
        let record = measure(&model, &class_samples(20, 8)).unwrap();
        assert!(
            (record.reference_forgetting - 1.0).abs() < 1e-12,
            "got {}",
            record.reference_forgetting
        );
    }

    #[test]
    fn per_input_bound_and_equivariances_hold() {
        let mut rng = Rng::new(11);
        for trial in 0..100 {
            let rows = 2 + (trial % 5);
            let cols = 2 + ((trial * 7) % 5);
            let delta = gaussian_matrix(rows, cols, 1.0, &mut rng).unwrap();
            let sigma = spectral_norm(&delta, SPECTRAL_TOL, SPECTRAL_ITERS).unwrap();
            let x: Vec<f64> = (0..cols).map(|_| rng.next_normal()).collect();
            let f = forgetting_of(&delta, &x).unwrap().unwrap();
            assert!(f <= sigma * (1.0 + 1e-8), "bound: {f} vs {sigma}");

            // Input scaling leaves F unchanged; update scaling is linear.
            let x2: Vec<f64> = x.iter().map(|v| v * -3.5).collect();
            let f2 = forgetting_of(&delta, &x2).unwrap().unwrap();
            assert!((f - f2).abs() < 1e-12);
            let f3 = forgetting_of(&delta.scale(2.5), &x).unwrap().unwrap();
            assert!((f3 - 2.5 * f).abs() < 1e-12);
            let s3 = spectral_norm(&delta.scale(2.5), SPECTRAL_TOL, SPECTRAL_ITERS).unwrap();
            assert!((s3 - 2.5 * sigma).abs() < 1e-9 * sigma.max(1.0));
        }
    }

    fn sweep_fixture() -> (TinyModelConfig, TrainConfig, Dataset, Dataset) {
        let model_cfg = TinyModelConfig {
            shape: ModelShape::Mlp {
                input_dim: 6,
                hidden_dim: 6,
                num_classes: 2,
            },
            adapter_targets: vec![AdapterTarget::MlpUp],
            rank: 2,
            alpha: 4.0,
            lambda: 1.0,
            adapter_init_std: 0.2,
            reg: Some(RegConfig { variant: RegVariant::Random, k: 2 }),
            dropout: 0.0,
        };
        let train_cfg = TrainConfig {
            method: TrainMethod::Clora,
            lr: 0.02,
            batch_size: 8,
            epochs: 4,
            warmup_steps: 2,
            weight_decay: 0.0,
            l2_reg_weight: 0.0,
            seed: 0,
            grad_clip: None,
        };
        let mut inputs = gaussian_matrix(6, 24, 1.0, &mut Rng::new(20)).unwrap();
        let mut labels = Vec::new();
        for j in 0..24 {
            let class = j % 2;
            inputs[(0, j)] += if class == 0 { -3.0 } else { 3.0 };
            labels.push(class);
        }
        let train = Dataset::classification(inputs.clone(), labels.clone()).unwrap();
        let test = Dataset::classification(inputs, labels).unwrap();
        (model_cfg, train_cfg, train, test)
    }

    #[test]
    fn sweep_rows_are_finite_and_ordered() {
        let (mc, tc, train, test) = sweep_fixture();
        let rows = sweep_k(&mc, &tc, &train, &test, &[2, 4], &[1, 2], 1).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].k, 2);
        assert_eq!(rows[1].k, 4);
        for r in &rows {
            assert!(r.capacity.is_finite() && r.capacity >= 0.0);
            assert!(r.forgetting.is_finite() && r.forgetting >= 0.0);
        }
    }

    #[test]
    fn sweep_is_deterministic_and_thread_count_invariant() {
        let (mc, tc, train, test) = sweep_fixture();
        let serial = sweep_k(&mc, &tc, &train, &test, &[2, 4], &[1, 2], 1).unwrap();
        let parallel = sweep_k(&mc, &tc, &train, &test, &[2, 4], &[1, 2], 4).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn k_zero_row_equals_plain_lora() {
        let (mc, tc, train, test) = sweep_fixture();
        let with_zero = sweep_k(&mc, &tc, &train, &test, &[0, 2], &[5], 1).unwrap();
        let mut plain_cfg = mc.clone();
        plain_cfg.reg = None;
        let mut plain_tc = tc.clone();
        plain_tc.method = TrainMethod::Lora;
        let mut model = TinyModel::init(plain_cfg, &Rng::new(5)).unwrap();
        {
            let mut t = plain_tc.clone();
            t.seed = 5;
            train_task(&mut model, &train, &t).unwrap();
        }
        let record = measure(&model, &test).unwrap();
        assert_eq!(with_zero[0].capacity, record.model_capacity);
        assert_eq!(with_zero[0].forgetting, record.model_forgetting);
    }

    #[test]
    fn sweep_validates_inputs() {
        let (mc, tc, train, test) = sweep_fixture();
        assert!(sweep_k(&mc, &tc, &train, &test, &[], &[1], 1).is_err());
        assert!(sweep_k(&mc, &tc, &train, &test, &[4, 2], &[1], 1).is_err());
        let mut no_reg = mc.clone();
        no_reg.reg = None;
        assert!(sweep_k(&no_reg, &tc, &train, &test, &[2], &[1], 1).is_err());
    }
}
