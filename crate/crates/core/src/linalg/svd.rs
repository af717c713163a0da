//! Singular value decomposition via one-sided Jacobi rotations.
//!
//! Chosen over bidiagonalization because it is short, numerically robust at
//! the sizes we care about, and every step is elementwise-deterministic, so
//! identical inputs give bit-identical factors across runs and platforms.

use super::{vec_dot, vec_norm, Matrix};
use crate::error::{Error, Result};

/// Thin SVD `a = u * diag(s) * vt` with `p = min(rows, cols)`:
/// `u` is rows x p, `s` has p nonnegative entries in descending order,
/// `vt` is p x cols. Columns of `u` and rows of `vt` are orthonormal even
/// when `a` is rank-deficient (missing directions are completed from the
/// standard basis, deterministically).
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

/// Relative off-diagonal threshold below which a column pair counts as
/// orthogonal and the sweep loop may stop.
const JACOBI_TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 64;

pub fn svd(a: &Matrix) -> Result<SvdResult> {
    // One-sided Jacobi wants at least as many rows as columns; transpose if
    // needed and swap the roles of u and v afterwards.
    let transposed = a.rows() < a.cols();
    let work = if transposed { a.transpose() } else { a.clone() };
    let (u_w, s, v_w) = jacobi(work)?;
    if transposed {
        Ok(SvdResult {
            u: v_w,
            s,
            vt: u_w.transpose(),
        })
    } else {
        Ok(SvdResult {
            u: u_w,
            s,
            vt: v_w.transpose(),
        })
    }
}

/// Core routine for m >= n. Returns (u: m x n, s: n, v: n x n).
fn jacobi(mut u: Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = u.shape();
    debug_assert!(m >= n);
    let mut v = Matrix::identity(n);

    let mut converged = false;
    for sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let ci = u.column(i);
                let cj = u.column(j);
                let alpha = vec_dot(&ci, &ci);
                let beta = vec_dot(&cj, &cj);
                let gamma = vec_dot(&ci, &cj);
                let scale = (alpha * beta).sqrt();
                if scale == 0.0 || gamma.abs() <= JACOBI_TOL * scale {
                    continue;
                }
                rotated = true;
                // Rotation angle that zeroes the (i,j) entry of the 2x2 Gram.
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                rotate_columns(&mut u, i, j, cs, sn);
                rotate_columns(&mut v, i, j, cs, sn);
            }
        }
        if !rotated {
            converged = true;
            let _ = sweep;
            break;
        }
    }
    if !converged {
        let worst = (0..n).map(|j| vec_norm(&u.column(j))).fold(0.0, f64::max);
        return Err(Error::NoConvergence {
            iters: MAX_SWEEPS,
            last_estimate: worst,
        });
    }

    // Singular values are the column norms; sort descending, stably.
    let norms: Vec<f64> = (0..n).map(|j| vec_norm(&u.column(j))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));

    let mut s = Vec::with_capacity(n);
    let mut u_sorted = Matrix::zeros(m, n);
    let mut v_sorted = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        s.push(norms[src]);
        u_sorted.set_column(dst, &u.column(src));
        v_sorted.set_column(dst, &v.column(src));
    }

    // Normalize the left columns. Columns whose norm is negligible relative
    // to the largest singular value carry no directional information, so
    // they are rebuilt from standard basis vectors instead.
    let s_max = s.first().copied().unwrap_or(0.0);
    let thresh = s_max * 1e-13;
    let mut deficient = Vec::new();
    for j in 0..n {
        if s[j] > thresh && s[j] > 0.0 {
            let col: Vec<f64> = u_sorted.column(j).iter().map(|x| x / s[j]).collect();
            u_sorted.set_column(j, &col);
        } else {
            deficient.push(j);
        }
    }
    for &j in &deficient {
        let col = complete_column(&u_sorted, j)?;
        u_sorted.set_column(j, &col);
        s[j] = 0.0;
    }
    Ok((u_sorted, s, v_sorted))
}

fn rotate_columns(m: &mut Matrix, i: usize, j: usize, cs: f64, sn: f64) {
    for r in 0..m.rows() {
        let a = m[(r, i)];
        let b = m[(r, j)];
        m[(r, i)] = cs * a - sn * b;
        m[(r, j)] = sn * a + cs * b;
    }
}

/// Unit vector orthogonal to all columns of `u` other than `skip` (and to
/// any already-completed columns before it). Picks the standard basis vector
/// with the largest residual after projection, lowest index winning ties.
fn complete_column(u: &Matrix, skip: usize) -> Result<Vec<f64>> {
    let m = u.rows();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..m {
        let mut cand = vec![0.0; m];
        cand[e] = 1.0;
        for _ in 0..2 {
            for j in 0..u.cols() {
                if j == skip {
                    continue;
                }
                let col = u.column(j);
                let proj = vec_dot(&cand, &col);
                for (c, q) in cand.iter_mut().zip(&col) {
                    *c -= proj * q;
                }
            }
        }
        let norm = vec_norm(&cand);
        if best.as_ref().map_or(true, |(b, _)| norm > *b + 1e-12) {
            best = Some((norm, cand));
        }
    }
    let (norm, mut cand) = best.unwrap();
    if norm < 1e-6 {
        return Err(Error::invalid_state(
            "basis completion failed: no independent direction".to_string(),
        ));
    }
    for c in cand.iter_mut() {
        *c /= norm;
    }
    Ok(cand)
}
