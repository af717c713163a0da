//! Deterministic dense linear algebra on 64-bit floats.
//!
//! Everything in the crate moves through [`Matrix`]: a row-major dense 2-D
//! array. Sizes are desk-scale (tens of rows/columns), so the implementations
//! favor clarity and bit-reproducibility over BLAS-grade speed. All
//! operations are pure functions of their inputs; randomness comes only from
//! an explicitly passed [`Rng`].

mod rng;
mod spectral;
mod svd;

pub use rng::{Rng, RngState};
pub use spectral::spectral_norm;
pub use svd::{svd, SvdResult};

use crate::error::{Error, Result};

/// Dense 2-D array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zero matrix. Dimensions must be positive.
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Row-major data without the finiteness check; used internally where
    /// overflow must flow through to a single detection point (training
    /// divergence) instead of erroring mid-expression.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Matrix {
        debug_assert!(rows > 0 && cols > 0 && data.len() == rows * cols);
        Matrix { rows, cols, data }
    }

    /// Builds from row-major data; checks length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid_argument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid_argument(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid_argument(
                "matrix entries must be finite".to_string(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        if rows.is_empty() {
            return Err(Error::invalid_argument("no rows given".to_string()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid_argument("ragged rows".to_string()));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    /// Column vector from a slice.
    pub fn column_vector(v: &[f64]) -> Result<Matrix> {
        Matrix::from_vec(v.len(), 1, v.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows);
        for i in 0..self.rows {
            self[(i, j)] = v[i];
        }
    }

    /// Copy of columns `start..end` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        assert!(start < end && end <= self.cols);
        let mut out = Matrix::zeros(self.rows, end - start);
        for i in 0..self.rows {
            for j in start..end {
                out[(i, j - start)] = self[(i, j)];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::invalid_argument(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in a_row.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (j, &bkj) in b_row.iter().enumerate() {
                    out_row[j] += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::invalid_argument(format!(
                "{op} shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        debug_assert!(s.is_finite());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// `self += other`.
    pub fn add_inplace(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid_argument(format!(
                "add shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += s * other`.
    pub fn add_scaled_inplace(&mut self, other: &Matrix, s: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid_argument(format!(
                "add shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Matrix-vector product `self * v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::invalid_argument(format!(
                "matvec shape mismatch: {}x{} * len {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect())
    }

    /// Matrix-vector product with the transpose, `selfᵀ * v`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::invalid_argument(format!(
                "matvec_t shape mismatch: {}x{}ᵀ * len {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let vi = v[i];
            if vi == 0.0 {
                continue;
            }
            for (j, &aij) in self.row(i).iter().enumerate() {
                out[j] += aij * vi;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs()))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Euclidean norm of a vector.
pub fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

pub fn vec_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Matrix with i.i.d. normal(0, std²) entries drawn row-major from `rng`.
pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid_argument(format!(
            "dimensions must be positive, got {rows}x{cols}"
        )));
    }
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::invalid_argument(format!(
            "std must be positive and finite, got {std}"
        )));
    }
    let data = (0..rows * cols).map(|_| std * rng.next_normal()).collect();
    Matrix::from_vec(rows, cols, data)
}

/// `m x k` matrix with orthonormal columns: QR of a Gaussian draw via
/// modified Gram-Schmidt with one re-orthogonalization pass. The R diagonal
/// is nonnegative by construction, so the output is unique per seed.
pub fn orthonormal_init(m: usize, k: usize, rng: &mut Rng) -> Result<Matrix> {
    if m == 0 || k == 0 {
        return Err(Error::invalid_argument(format!(
            "dimensions must be positive, got m={m}, k={k}"
        )));
    }
    if k > m {
        return Err(Error::invalid_argument(format!(
            "cannot build {k} orthonormal columns in dimension {m}"
        )));
    }
    let mut q = Matrix::zeros(m, k);
    let mut j = 0;
    while j < k {
        let mut col: Vec<f64> = (0..m).map(|_| rng.next_normal()).collect();
        // Two projection passes keep |QᵀQ - I| near machine epsilon.
        for _ in 0..2 {
            for prev in 0..j {
                let qprev = q.column(prev);
                let proj = vec_dot(&col, &qprev);
                for (c, qp) in col.iter_mut().zip(&qprev) {
                    *c -= proj * qp;
                }
            }
        }
        let norm = vec_norm(&col);
        if norm < 1e-8 {
            // Degenerate draw (probability ~0); redraw this column.
            continue;
        }
        for c in col.iter_mut() {
            *c /= norm;
        }
        q.set_column(j, &col);
        j += 1;
    }
    Ok(q)
}
