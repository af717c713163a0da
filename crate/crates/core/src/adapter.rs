//! Low-rank adapters with optional orthogonal subspace regularization.
//!
//! An adapter freezes a base matrix `w` and learns an additive update
//! `ΔW = (alpha/r)·A·Bᵀ` of rank at most `r`. The optional [`RegPair`]
//! carries frozen orthonormal direction sets `(p_a, p_b)`; the training loss
//! can then penalize overlap between the learned factors and those
//! directions, which steers the null space of the update: inputs lying in
//! the penalized subspace pass through (almost) unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, orthonormal_init, svd, Matrix, Rng};

/// How the frozen regularization directions are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegVariant {
    /// Random orthonormal columns.
    Random,
    /// Top-k left/right singular vectors of the base matrix.
    SvdMajor,
    /// Bottom-k left/right singular vectors of the base matrix.
    SvdMinor,
}

impl std::fmt::Display for RegVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegVariant::Random => "random",
            RegVariant::SvdMajor => "svd_major",
            RegVariant::SvdMinor => "svd_minor",
        })
    }
}

impl std::str::FromStr for RegVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<RegVariant> {
        match s {
            "random" => Ok(RegVariant::Random),
            "svd_major" => Ok(RegVariant::SvdMajor),
            "svd_minor" => Ok(RegVariant::SvdMinor),
            other => Err(Error::invalid_argument(format!(
                "unknown regularization variant '{other}' (expected random, svd_major, or svd_minor)"
            ))),
        }
    }
}

/// Frozen pair of direction sets with `k` orthonormal columns each:
/// `p_a` lives in the output space (rows of the base matrix), `p_b` in the
/// input space (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct RegPair {
    pub p_a: Matrix,
    pub p_b: Matrix,
    pub k: usize,
    pub variant: RegVariant,
}

/// Frozen base matrix plus trainable low-rank factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// Frozen base weight, m x n.
    pub w: Matrix,
    /// Trainable factor, m x r; Gaussian at init.
    pub a: Matrix,
    /// Trainable factor, n x r; zero at init so the update starts at zero.
    pub b: Matrix,
    pub rank: usize,
    /// Scaling numerator: the effective update is (alpha/rank)·A·Bᵀ.
    pub alpha: f64,
    pub reg: Option<RegPair>,
}

impl LoraAdapter {
    /// Multiplier applied to A·Bᵀ.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// The effective update ΔW = (alpha/r)·A·Bᵀ, materialized.
    pub fn delta(&self) -> Matrix {
        let ab = self
            .a
            .matmul(&self.b.transpose())
            .expect("factor shapes fixed at init");
        ab.scale(self.scaling())
    }

    /// `w·x + ΔW·x` for a batch of column vectors, computed factor-first so
    /// the m x n update is never materialized. At init (b = 0) this equals
    /// `w·x` bitwise.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = self.w.matmul(x)?;
        let btx = self.b.transpose().matmul(x)?;
        let low = self.a.matmul(&btx)?;
        y.add_scaled_inplace(&low, self.scaling())?;
        Ok(y)
    }

    /// Base weight with the update folded in: `w + ΔW`.
    pub fn merge(&self) -> Matrix {
        let mut merged = self.w.clone();
        merged
            .add_inplace(&self.delta())
            .expect("delta shape equals w shape");
        merged
    }

    /// Sum of the orthogonality penalties on both factors against the
    /// attached direction pair.
    pub fn clora_reg_loss(&self) -> Result<f64> {
        let reg = self.reg.as_ref().ok_or_else(|| {
            Error::invalid_state("adapter has no regularization pair attached".to_string())
        })?;
        Ok(orth_loss(&self.a, &reg.p_a)? + orth_loss(&self.b, &reg.p_b)?)
    }
}

/// Fresh adapter for base weight `w`: A drawn Gaussian(0, std²), B zero, so
/// the initial update is exactly zero.
pub fn init_adapter(
    w: Matrix,
    rank: usize,
    alpha: f64,
    std: f64,
    rng: &mut Rng,
) -> Result<LoraAdapter> {
    let (m, n) = w.shape();
    if rank == 0 || rank > m.min(n) {
        return Err(Error::invalid_argument(format!(
            "rank must be in 1..={}, got {rank}",
            m.min(n)
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid_argument(format!(
            "alpha must be positive and finite, got {alpha}"
        )));
    }
    let a = gaussian_matrix(m, rank, std, rng)?;
    let b = Matrix::zeros(n, rank);
    Ok(LoraAdapter {
        w,
        a,
        b,
        rank,
        alpha,
        reg: None,
    })
}

/// Builds the frozen direction pair for base weight `w`.
///
/// `random` draws fresh orthonormal columns; the SVD variants take the top-k
/// (`svd_major`) or bottom-k (`svd_minor`) left/right singular vectors of
/// `w`, with singular values sorted descending and ties left in stable
/// order.
pub fn init_reg(variant: RegVariant, w: &Matrix, k: usize, rng: &mut Rng) -> Result<RegPair> {
    let (m, n) = w.shape();
    // k columns must fit in both the m- and n-dimensional spaces.
    let p = m.min(n);
    if k == 0 || k > p {
        return Err(Error::invalid_argument(format!(
            "k must be in 1..={p}, got {k}"
        )));
    }
    let (p_a, p_b) = match variant {
        RegVariant::Random => {
            let p_a = orthonormal_init(m, k, rng)?;
            let p_b = orthonormal_init(n, k, rng)?;
            (p_a, p_b)
        }
        RegVariant::SvdMajor => {
            let f = svd(w)?;
            (f.u.columns(0, k), f.vt.transpose().columns(0, k))
        }
        RegVariant::SvdMinor => {
            let f = svd(w)?;
            let v = f.vt.transpose();
            (f.u.columns(p - k, p), v.columns(p - k, p))
        }
    };
    Ok(RegPair {
        p_a,
        p_b,
        k,
        variant,
    })
}

/// Orthogonality penalty between the columns of a trainable factor and the
/// columns of a frozen direction set sharing the same row space: the sum of
/// squared pairwise inner products, i.e. ‖MᵀP‖_F².
pub fn orth_loss(m_trainable: &Matrix, p: &Matrix) -> Result<f64> {
    if m_trainable.rows() != p.rows() {
        return Err(Error::invalid_argument(format!(
            "row mismatch: factor has {} rows, directions have {}",
            m_trainable.rows(),
            p.rows()
        )));
    }
    let cross = m_trainable.transpose().matmul(p)?;
    Ok(cross.data().iter().map(|&x| x * x).sum())
}

/// Analytic gradient of [`orth_loss`] with respect to the trainable factor:
/// `2·P·(Pᵀ·M)`.
pub fn orth_loss_grad(m_trainable: &Matrix, p: &Matrix) -> Result<Matrix> {
    if m_trainable.rows() != p.rows() {
        return Err(Error::invalid_argument(format!(
            "row mismatch: factor has {} rows, directions have {}",
            m_trainable.rows(),
            p.rows()
        )));
    }
    let ptm = p.transpose().matmul(m_trainable)?;
    Ok(p.matmul(&ptm)?.scale(2.0))
}
