//! Synthetic task generation.
//!
//! Three task families with a controlled conflict knob, so sequential
//! training measurably overwrites earlier tasks:
//! - `gaussian_classes`: isotropic Gaussian blobs at displaced means drawn
//!   fresh per task.
//! - `rotated_features`: fixed axis-aligned class means, with the whole
//!   feature space rotated a bit further for each task in the sequence.
//! - `char_lm`: Markov token streams where each task prefers a different
//!   successor offset.
//!
//! Every dataset is a pure function of the spec: train and test splits come
//! from disjoint derived random streams under the task seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{orthonormal_init, Matrix, Rng};
use crate::model::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    GaussianClasses,
    RotatedFeatures,
    CharLm,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::GaussianClasses => "gaussian_classes",
            TaskKind::RotatedFeatures => "rotated_features",
            TaskKind::CharLm => "char_lm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    /// Feature dimension for the classification kinds; unused for char_lm.
    pub dims: usize,
    /// Class count, or vocabulary size for char_lm.
    pub num_classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub task_seed: u64,
    /// Class-mean separation in units of the unit noise σ.
    #[serde(default)]
    pub displacement: f64,
    /// Extra feature-space rotation applied per task index, radians.
    #[serde(default)]
    pub rotation_angle: f64,
    /// Token count per char_lm sequence.
    #[serde(default)]
    pub seq_len: usize,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_samples == 0 || self.test_samples == 0 {
            return Err(Error::config("need at least one sample per split".to_string()));
        }
        match self.kind {
            TaskKind::GaussianClasses | TaskKind::RotatedFeatures => {
                if self.num_classes < 2 {
                    return Err(Error::config("need at least two classes".to_string()));
                }
                if self.dims < self.num_classes {
                    return Err(Error::config(format!(
                        "dims {} must be at least num_classes {} so class means can be orthogonal",
                        self.dims, self.num_classes
                    )));
                }
                if !(self.displacement > 0.0) || !self.displacement.is_finite() {
                    return Err(Error::config(
                        "displacement must be positive and finite".to_string(),
                    ));
                }
                if self.kind == TaskKind::RotatedFeatures {
                    if self.dims < 2 {
                        return Err(Error::config("rotation needs dims >= 2".to_string()));
                    }
                    if !self.rotation_angle.is_finite() {
                        return Err(Error::config("rotation_angle must be finite".to_string()));
                    }
                }
            }
            TaskKind::CharLm => {
                if self.num_classes < 2 {
                    return Err(Error::config("char_lm needs a vocabulary of at least 2".to_string()));
                }
                if self.seq_len < 2 {
                    return Err(Error::config(
                        "char_lm needs seq_len >= 2 to form prediction targets".to_string(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The fixed class means of the rotated_features family before any
/// rotation: class c sits at displacement·e_c.
pub fn axis_class_means(spec: &SyntheticTaskSpec) -> Matrix {
    let mut means = Matrix::zeros(spec.dims, spec.num_classes);
    for c in 0..spec.num_classes {
        means[(c, c)] = spec.displacement;
    }
    means
}

/// Rotation applied to task `index` of a rotated_features sequence: plane
/// rotations by index·angle on coordinate pairs (0,1), (2,3), … — exact
/// identity at angle 0.
pub fn rotation_for_task(spec: &SyntheticTaskSpec, index: usize) -> Matrix {
    let theta = spec.rotation_angle * index as f64;
    let (sin, cos) = theta.sin_cos();
    let mut r = Matrix::identity(spec.dims);
    if index == 0 || spec.rotation_angle == 0.0 {
        return r;
    }
    for p in 0..spec.dims / 2 {
        let (i, j) = (2 * p, 2 * p + 1);
        r[(i, i)] = cos;
        r[(i, j)] = -sin;
        r[(j, i)] = sin;
        r[(j, j)] = cos;
    }
    r
}

/// Builds `count` (train, test) dataset pairs for the spec, deterministic
/// in the spec alone.
pub fn generate_tasks(spec: &SyntheticTaskSpec, count: usize) -> Result<Vec<(Dataset, Dataset)>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::invalid_argument("need at least one task".to_string()));
    }
    let root = Rng::new(spec.task_seed);
    let mut tasks = Vec::with_capacity(count);
    for i in 0..count {
        let task_rng = root.derive_indexed("task", i as u64);
        let pair = match spec.kind {
            TaskKind::GaussianClasses => {
                let mut means_rng = task_rng.derive("means");
                let dirs = orthonormal_init(spec.dims, spec.num_classes, &mut means_rng)?;
                let means = dirs.scale(spec.displacement);
                (
                    blob_split(&means, None, spec.train_samples, &mut task_rng.derive("train"))?,
                    blob_split(&means, None, spec.test_samples, &mut task_rng.derive("test"))?,
                )
            }
            TaskKind::RotatedFeatures => {
                let means = axis_class_means(spec);
                let rot = rotation_for_task(spec, i);
                (
                    blob_split(&means, Some(&rot), spec.train_samples, &mut task_rng.derive("train"))?,
                    blob_split(&means, Some(&rot), spec.test_samples, &mut task_rng.derive("test"))?,
                )
            }
            TaskKind::CharLm => {
                let prefs = transition_table(spec, i);
                (
                    lm_split(spec, &prefs, spec.train_samples, &mut task_rng.derive("train"))?,
                    lm_split(spec, &prefs, spec.test_samples, &mut task_rng.derive("test"))?,
                )
            }
        };
        tasks.push(pair);
    }
    Ok(tasks)
}

/// Draws n labeled points: label j%classes (balanced within ±1), point =
/// R·(mean + unit Gaussian noise).
fn blob_split(
    means: &Matrix,
    rotation: Option<&Matrix>,
    n: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    let dims = means.rows();
    let classes = means.cols();
    let mut inputs = Matrix::zeros(dims, n);
    let mut labels = Vec::with_capacity(n);
    for j in 0..n {
        let label = j % classes;
        let mut x = means.column(label);
        for v in x.iter_mut() {
            *v += rng.next_normal();
        }
        if let Some(r) = rotation {
            x = r.matvec(&x)?;
        }
        inputs.set_column(j, &x);
        labels.push(label);
    }
    Dataset::classification(inputs, labels)
}

/// Per-token successor probabilities for task `index`: each token prefers
/// the successor offset by index+1 with weight PREF, uniform elsewhere.
const PREF: f64 = 0.85;

fn transition_table(spec: &SyntheticTaskSpec, index: usize) -> Vec<Vec<f64>> {
    let v = spec.num_classes;
    let rest = (1.0 - PREF) / (v - 1) as f64;
    (0..v)
        .map(|c| {
            let favored = (c + 1 + index) % v;
            (0..v)
                .map(|next| if next == favored { PREF } else { rest })
                .collect()
        })
        .collect()
}

fn lm_split(
    spec: &SyntheticTaskSpec,
    table: &[Vec<f64>],
    n: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    let v = spec.num_classes;
    let mut seqs = Vec::with_capacity(n);
    for _ in 0..n {
        let mut seq = Vec::with_capacity(spec.seq_len);
        seq.push(rng.next_index(v));
        for t in 1..spec.seq_len {
            let row = &table[seq[t - 1]];
            let mut u = rng.next_f64();
            let mut next = v - 1;
            for (tok, &p) in row.iter().enumerate() {
                if u < p {
                    next = tok;
                    break;
                }
                u -= p;
            }
            seq.push(next);
        }
        seqs.push(seq);
    }
    Dataset::sequences(seqs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rotated_spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            kind: TaskKind::RotatedFeatures,
            dims: 6,
            num_classes: 2,
            train_samples: 40,
            test_samples: 30,
            task_seed: 9,
            displacement: 4.0,
            rotation_angle: 0.5,
            seq_len: 0,
        }
    }

    #[test]
    fn same_spec_gives_identical_datasets() {
        let spec = rotated_spec();
        let a = generate_tasks(&spec, 3).unwrap();
        let b = generate_tasks(&spec, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_and_test_splits_differ() {
        for kind in [TaskKind::GaussianClasses, TaskKind::RotatedFeatures, TaskKind::CharLm] {
            let mut spec = rotated_spec();
            spec.kind = kind;
            spec.test_samples = spec.train_samples;
            if kind == TaskKind::CharLm {
                spec.seq_len = 8;
                spec.num_classes = 5;
            }
            let tasks = generate_tasks(&spec, 1).unwrap();
            assert_ne!(tasks[0].0, tasks[0].1, "{kind}: splits share a stream");
        }
    }

    #[test]
    fn zero_angle_tasks_share_one_distribution() {
        let mut spec = rotated_spec();
        spec.rotation_angle = 0.0;
        spec.train_samples = 400;
        assert_eq!(rotation_for_task(&spec, 0), Matrix::identity(6));
        assert_eq!(rotation_for_task(&spec, 1), Matrix::identity(6));

        // Same generating parameters, yet fresh draws per task.
        let tasks = generate_tasks(&spec, 2).unwrap();
        assert_ne!(tasks[0].0, tasks[1].0);

        // Empirical class-0 means agree across tasks within sampling error.
        let mut mean = [vec![0.0; 6], vec![0.0; 6]];
        for (t, (train, _)) in tasks.iter().enumerate() {
            let Dataset::Classification { inputs, labels } = train else { unreachable!() };
            let n = labels.iter().filter(|&&l| l == 0).count();
            for (j, &l) in labels.iter().enumerate() {
                if l == 0 {
                    for d in 0..6 {
                        mean[t][d] += inputs[(d, j)] / n as f64;
                    }
                }
            }
        }
        for d in 0..6 {
            assert!(
                (mean[0][d] - mean[1][d]).abs() < 1.0,
                "dim {d}: {} vs {}",
                mean[0][d],
                mean[1][d]
            );
        }
    }

    #[test]
    fn rotations_are_orthogonal_and_grow_with_index() {
        let spec = rotated_spec();
        for i in 0..4 {
            let r = rotation_for_task(&spec, i);
            let gram = r.transpose().matmul(&r).unwrap();
            assert!(gram.max_abs_diff(&Matrix::identity(6)) < 1e-12);
        }
        // The rotation actually moves the class means once the angle is set.
        let means = axis_class_means(&spec);
        let moved = rotation_for_task(&spec, 2).matmul(&means).unwrap();
        assert!(moved.max_abs_diff(&means) > 1.0);
    }

    #[test]
    fn labels_are_balanced_within_one() {
        for n in [40, 41, 43] {
            let mut spec = rotated_spec();
            spec.num_classes = 3;
            spec.train_samples = n;
            let tasks = generate_tasks(&spec, 1).unwrap();
            let Dataset::Classification { labels, .. } = &tasks[0].0 else { unreachable!() };
            let mut counts = [0usize; 3];
            for &l in labels {
                counts[l] += 1;
            }
            let max = counts.iter().max().unwrap();
            let min = counts.iter().min().unwrap();
            assert!(max - min <= 1, "counts {counts:?} for n={n}");
        }
    }

    #[test]
    fn wide_separation_admits_a_near_perfect_linear_probe() {
        // Nearest-class-mean (a linear rule) on 6σ-separated blobs: the
        // one-dimensional margin is 3σ, so errors are ~Φ(-3) ≈ 0.1%.
        let spec = SyntheticTaskSpec {
            kind: TaskKind::GaussianClasses,
            dims: 8,
            num_classes: 2,
            train_samples: 400,
            test_samples: 400,
            task_seed: 12,
            displacement: 6.0,
            rotation_angle: 0.0,
            seq_len: 0,
        };
        let tasks = generate_tasks(&spec, 1).unwrap();
        let (train, test) = &tasks[0];
        let Dataset::Classification { inputs, labels } = train else { unreachable!() };
        let mut centroids = vec![vec![0.0; 8]; 2];
        let mut counts = [0usize; 2];
        for (j, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for d in 0..8 {
                centroids[l][d] += inputs[(d, j)];
            }
        }
        for (c, count) in counts.iter().enumerate() {
            for v in centroids[c].iter_mut() {
                *v /= *count as f64;
            }
        }
        let Dataset::Classification { inputs, labels } = test else { unreachable!() };
        let mut correct = 0;
        for (j, &l) in labels.iter().enumerate() {
            let x = inputs.column(j);
            let d0: f64 = x.iter().zip(&centroids[0]).map(|(a, b)| (a - b).powi(2)).sum();
            let d1: f64 = x.iter().zip(&centroids[1]).map(|(a, b)| (a - b).powi(2)).sum();
            if (d1 < d0) as usize == l {
                correct += 1;
            }
        }
        let acc = correct as f64 / labels.len() as f64;
        assert!(acc >= 0.99, "linear probe reached only {acc}");
    }

    #[test]
    fn char_lm_tokens_stay_in_vocabulary_and_tasks_differ() {
        let spec = SyntheticTaskSpec {
            kind: TaskKind::CharLm,
            dims: 0,
            num_classes: 6,
            train_samples: 20,
            test_samples: 10,
            task_seed: 3,
            displacement: 0.0,
            rotation_angle: 0.0,
            seq_len: 12,
        };
        let tasks = generate_tasks(&spec, 2).unwrap();
        for (train, test) in &tasks {
            for ds in [train, test] {
                let Dataset::SequenceLm { seqs } = ds else { unreachable!() };
                for s in seqs {
                    assert_eq!(s.len(), 12);
                    assert!(s.iter().all(|&t| t < 6));
                }
            }
        }
        assert_ne!(tasks[0].0, tasks[1].0, "tasks must use different chains");

        // Task 0 prefers successor +1: check the empirical fraction.
        let Dataset::SequenceLm { seqs } = &tasks[0].0 else { unreachable!() };
        let mut hits = 0;
        let mut total = 0;
        for s in seqs {
            for w in s.windows(2) {
                total += 1;
                if w[1] == (w[0] + 1) % 6 {
                    hits += 1;
                }
            }
        }
        let frac = hits as f64 / total as f64;
        assert!((frac - PREF).abs() < 0.1, "preferred-successor rate {frac}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = rotated_spec();
        spec.displacement = 0.0;
        assert!(generate_tasks(&spec, 1).is_err());
        let mut spec = rotated_spec();
        spec.num_classes = 7; // exceeds dims
        assert!(generate_tasks(&spec, 1).is_err());
        let mut spec = rotated_spec();
        spec.train_samples = 0;
        assert!(generate_tasks(&spec, 1).is_err());
        assert!(generate_tasks(&rotated_spec(), 0).is_err());
        let mut spec = rotated_spec();
        spec.kind = TaskKind::CharLm;
        spec.seq_len = 1;
        assert!(generate_tasks(&spec, 1).is_err());
    }
}
