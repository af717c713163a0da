//! Largest singular value via power iteration, independent of the SVD
//! routine so the two can cross-check each other.

use super::{vec_norm, Matrix, Rng};
use crate::error::{Error, Result};

/// Start-vector stream; fixed so repeated calls on the same matrix agree
/// bit-for-bit.
const START_SEED: u64 = 0x7351_ec75_0000_0001;

/// Largest singular value of `m`, estimated by power iteration on `mᵀm`.
///
/// The estimate is the Rayleigh-quotient value `|m v|` for the current unit
/// iterate `v`; it increases monotonically toward the true value. Iteration
/// stops once a geometric extrapolation of successive differences bounds the
/// remaining error below `tol` relative to the estimate. Exceeding
/// `max_iters` yields [`Error::NoConvergence`] carrying the last estimate.
pub fn spectral_norm(m: &Matrix, tol: f64, max_iters: usize) -> Result<f64> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::invalid_argument(format!(
            "tol must be positive and finite, got {tol}"
        )));
    }
    if max_iters == 0 {
        return Err(Error::invalid_argument("max_iters must be positive".to_string()));
    }

    let mut rng = Rng::new(START_SEED);
    let mut v: Vec<f64> = (0..m.cols()).map(|_| rng.next_normal()).collect();
    let norm = vec_norm(&v);
    for x in v.iter_mut() {
        *x /= norm;
    }

    let mut sigma_prev = 0.0;
    let mut diff_prev = f64::INFINITY;
    let mut sigma = 0.0;
    for iter in 0..max_iters {
        let w = m.matvec(&v)?;
        sigma = vec_norm(&w);
        if sigma == 0.0 {
            // v is in the null space. For a zero matrix that is exact; for a
            // nonzero matrix the Gaussian start makes this a measure-zero
            // event, so treat it as a true zero either way.
            return Ok(0.0);
        }

        if iter > 0 {
            let diff = sigma - sigma_prev;
            if diff <= 0.0 {
                // Monotone sequence has stalled at working precision.
                return Ok(sigma);
            }
            if diff_prev.is_finite() && diff_prev > 0.0 {
                let q = diff / diff_prev;
                if q < 1.0 {
                    let remaining = diff * q / (1.0 - q);
                    if remaining <= tol * sigma {
                        return Ok(sigma);
                    }
                }
            }
            diff_prev = diff;
        }
        sigma_prev = sigma;

        let mut next = m.matvec_t(&w)?;
        let norm = vec_norm(&next);
        if norm == 0.0 {
            return Ok(0.0);
        }
        for x in next.iter_mut() {
            *x /= norm;
        }
        v = next;
    }
    Err(Error::NoConvergence {
        iters: max_iters,
        last_estimate: sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, svd};

    const TOL: f64 = 1e-12;
    const ITERS: usize = 50_000;

    #[test]
    fn diagonal_matrix_gives_max_magnitude() {
        let mut a = Matrix::zeros(3, 3);
        a[(0, 0)] = -7.0;
        a[(1, 1)] = 2.0;
        a[(2, 2)] = 5.0;
        let s = spectral_norm(&a, TOL, ITERS).unwrap();
        assert!((s - 7.0).abs() < 1e-10, "got {s}");
    }

    #[test]
    fn identity_has_unit_norm() {
        let s = spectral_norm(&Matrix::identity(6), TOL, ITERS).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "got {s}");
    }

    #[test]
    fn zero_matrix_gives_zero() {
        assert_eq!(spectral_norm(&Matrix::zeros(4, 3), TOL, ITERS).unwrap(), 0.0);
    }

    #[test]
    fn rank_one_closed_form() {
        let u = Matrix::from_vec(3, 1, vec![1.0, -2.0, 2.0]).unwrap();
        let v = Matrix::from_vec(1, 4, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let a = u.matmul(&v).unwrap();
        let s = spectral_norm(&a, TOL, ITERS).unwrap();
        assert!((s - 3.0).abs() < 1e-10, "got {s}"); // |u| = 3, |v| = 1
    }

    #[test]
    fn agrees_with_svd_on_random_matrices() {
        for seed in 0..10u64 {
            let rows = 2 + (seed as usize % 6);
            let cols = 2 + ((seed as usize * 3) % 7);
            let a = gaussian_matrix(rows, cols, 1.0, &mut Rng::new(100 + seed)).unwrap();
            let via_power = spectral_norm(&a, TOL, ITERS).unwrap();
            let via_svd = svd(&a).unwrap().s[0];
            let rel = (via_power - via_svd).abs() / via_svd;
            assert!(rel < 1e-10, "seed {seed}: power {via_power} vs svd {via_svd}");
        }
    }

    #[test]
    fn repeated_calls_are_bitwise_identical() {
        let a = gaussian_matrix(5, 5, 1.0, &mut Rng::new(9)).unwrap();
        let s1 = spectral_norm(&a, TOL, ITERS).unwrap();
        let s2 = spectral_norm(&a, TOL, ITERS).unwrap();
        assert_eq!(s1.to_bits(), s2.to_bits());
    }

    #[test]
    fn iteration_cap_reports_last_estimate() {
        let a = gaussian_matrix(6, 6, 1.0, &mut Rng::new(21)).unwrap();
        match spectral_norm(&a, 1e-15, 1) {
            Err(Error::NoConvergence { iters, last_estimate }) => {
                assert_eq!(iters, 1);
                assert!(last_estimate > 0.0);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let a = Matrix::identity(2);
        assert!(spectral_norm(&a, 0.0, 10).is_err());
        assert!(spectral_norm(&a, 1e-10, 0).is_err());
    }
}
