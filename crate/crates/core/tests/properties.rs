//! Randomized property checks over the public surface.

use proptest::prelude::*;

use clora_core::adapter::{init_adapter, init_reg, RegVariant};
use clora_core::harness::{
    ContinualSection, ExperimentConfig, SweepSection, SyntheticTaskSpec, TaskKind,
};
use clora_core::linalg::{gaussian_matrix, orthonormal_init, Matrix, Rng};
use clora_core::metrics::forgetting_of;
use clora_core::model::{AdapterTarget, ModelShape, RegConfig, TinyModelConfig};
use clora_core::trainer::{lr_at, TrainConfig, TrainMethod};

fn gram_defect(p: &Matrix) -> f64 {
    let gram = p.transpose().matmul(p).unwrap();
    gram.max_abs_diff(&Matrix::identity(p.cols()))
}

proptest! {
    /// Orthonormal bases stay orthonormal at every requested width.
    #[test]
    fn orthonormal_init_has_identity_gram(
        m in 1usize..48,
        k_frac in 0.0f64..1.0,
        seed in 0u64..1_000_000,
    ) {
        let k = 1 + ((m - 1) as f64 * k_frac) as usize;
        let q = orthonormal_init(m, k, &mut Rng::new(seed)).unwrap();
        prop_assert!(gram_defect(&q) < 1e-10);
    }

    /// Direction pairs are orthonormal for every variant and shape.
    #[test]
    fn direction_pairs_are_orthonormal(
        rows in 2usize..24,
        cols in 2usize..24,
        k_frac in 0.0f64..1.0,
        variant_idx in 0usize..3,
        seed in 0u64..1_000_000,
    ) {
        let p = rows.min(cols);
        let k = 1 + ((p - 1) as f64 * k_frac) as usize;
        let variant = [RegVariant::Random, RegVariant::SvdMajor, RegVariant::SvdMinor][variant_idx];
        let mut rng = Rng::new(seed);
        let w = gaussian_matrix(rows, cols, 1.0, &mut rng).unwrap();
        let reg = init_reg(variant, &w, k, &mut rng).unwrap();
        prop_assert!(gram_defect(&reg.p_a) < 1e-10, "P_A defect {}", gram_defect(&reg.p_a));
        prop_assert!(gram_defect(&reg.p_b) < 1e-10, "P_B defect {}", gram_defect(&reg.p_b));
    }

    /// Fresh adapters change nothing: the update is exactly zero.
    #[test]
    fn fresh_adapters_have_zero_update(
        rows in 1usize..16,
        cols in 1usize..16,
        seed in 0u64..1_000_000,
    ) {
        let mut rng = Rng::new(seed);
        let w = gaussian_matrix(rows, cols, 1.0, &mut rng).unwrap();
        let rank = rows.min(cols);
        let ad = init_adapter(w, rank, 2.0 * rank as f64, 0.1, &mut rng).unwrap();
        prop_assert_eq!(ad.delta().max_abs(), 0.0);
    }

    /// Relative output change ignores input scale and follows update scale.
    #[test]
    fn forgetting_scale_laws(
        rows in 1usize..12,
        cols in 1usize..12,
        seed in 0u64..1_000_000,
        c in prop::sample::select(vec![-4.0f64, -0.5, 0.25, 3.0]),
    ) {
        let mut rng = Rng::new(seed);
        let delta = gaussian_matrix(rows, cols, 1.0, &mut rng).unwrap();
        let x: Vec<f64> = (0..cols).map(|_| rng.next_normal()).collect();
        let f = forgetting_of(&delta, &x).unwrap().unwrap();
        let scaled_x: Vec<f64> = x.iter().map(|v| v * c).collect();
        let f_sx = forgetting_of(&delta, &scaled_x).unwrap().unwrap();
        prop_assert!((f - f_sx).abs() < 1e-12);
        let f_sd = forgetting_of(&delta.scale(c), &x).unwrap().unwrap();
        prop_assert!((f_sd - c.abs() * f).abs() < 1e-12 * (1.0 + f));
    }

    /// The schedule stays within [0, base] and hits base right at warmup end.
    #[test]
    fn lr_schedule_is_bounded(
        total in 2u64..500,
        warmup_frac in 0.0f64..0.95,
        base_exp in -4.0f64..0.0,
    ) {
        let warmup = (total as f64 * warmup_frac) as u64;
        let base = 10f64.powf(base_exp);
        for step in 0..=total {
            let lr = lr_at(step, total, warmup, base).unwrap();
            prop_assert!(lr >= 0.0 && lr <= base, "step {step}: {lr}");
        }
        if warmup > 0 {
            prop_assert!((lr_at(warmup, total, warmup, base).unwrap() - base).abs() < 1e-15);
        }
        prop_assert_eq!(lr_at(total, total, warmup, base).unwrap(), 0.0);
    }

    /// Any valid experiment config survives the text round trip unchanged.
    #[test]
    fn config_round_trip(cfg in experiment_config_strategy()) {
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

prop_compose! {
    fn experiment_config_strategy()(
        mlp in any::<bool>(),
        dims in 4usize..12,
        hidden in 4usize..12,
        rank in 1usize..3,
        lambda in 0.0f64..4.0,
        k in 1usize..4,
        variant_idx in 0usize..3,
        use_reg in any::<bool>(),
        seed in 0u64..1000,
        task_seed in 0u64..1000,
        lr_exp in -4.0f64..-1.0,
        epochs in 1usize..5,
        displacement in 1.0f64..8.0,
        angle in 0.0f64..1.5,
    ) -> ExperimentConfig {
        let shape = if mlp {
            ModelShape::Mlp { input_dim: dims, hidden_dim: hidden, num_classes: 2 }
        } else {
            ModelShape::Transformer { vocab_size: dims, seq_len: 5, embed_dim: hidden, hidden_dim: hidden }
        };
        let adapter_targets = if mlp {
            vec![AdapterTarget::MlpUp]
        } else {
            vec![AdapterTarget::Query, AdapterTarget::MlpUp]
        };
        let reg = use_reg.then(|| RegConfig {
            variant: [RegVariant::Random, RegVariant::SvdMajor, RegVariant::SvdMinor][variant_idx],
            k,
        });
        let method = if reg.is_some() { TrainMethod::Clora } else { TrainMethod::Lora };
        let task = if mlp {
            SyntheticTaskSpec {
                kind: TaskKind::RotatedFeatures,
                dims: dims.max(2),
                num_classes: 2,
                train_samples: 16,
                test_samples: 8,
                task_seed,
                displacement,
                rotation_angle: angle,
                seq_len: 0,
            }
        } else {
            SyntheticTaskSpec {
                kind: TaskKind::CharLm,
                dims: 0,
                num_classes: dims,
                train_samples: 8,
                test_samples: 4,
                task_seed,
                displacement: 0.0,
                rotation_angle: 0.0,
                seq_len: 5,
            }
        };
        ExperimentConfig {
            model: TinyModelConfig {
                shape,
                adapter_targets,
                rank,
                alpha: 2.0 * rank as f64,
                lambda: if reg.is_some() { lambda } else { 0.0 },
                adapter_init_std: 0.1,
                reg,
                dropout: 0.0,
            },
            train: TrainConfig {
                method,
                lr: 10f64.powf(lr_exp),
                batch_size: 4,
                epochs,
                warmup_steps: 1,
                weight_decay: 0.0,
                l2_reg_weight: 0.0,
                seed,
                grad_clip: None,
            },
            task,
            output_dir: "out".to_string(),
            continual: ContinualSection::default(),
            sweep: SweepSection::default(),
        }
    }
}
