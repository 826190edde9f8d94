//! Dense and sparse (CSR) matrix kernels.
//!
//! Everything in the crate is built on two storage types: [`DenseMatrix`],
//! a row-major `f64` matrix, and [`CsrMatrix`], a compressed-sparse-row
//! matrix used for graph operators and attention patterns. The kernels
//! here are deliberately plain loops: graphs of the size this crate
//! targets (up to a few thousand nodes) do not justify a BLAS dependency,
//! and plain loops keep results bit-reproducible across platforms.
//!
//! Numerical routines:
//!
//! * [`spectral_norm_dense`] / [`spectral_norm_sparse`] estimate the
//!   largest singular value by power iteration on `mᵀm`.
//! * [`jacobi_eigh`] computes the full eigendecomposition of a small
//!   symmetric matrix by cyclic Jacobi rotations (Golub & Van Loan,
//!   *Matrix Computations*, §8.5).

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Creates a `rows x cols` matrix of zeros.
    #[must_use]
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Creates a matrix from a row-major data vector.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{} elements for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Creates a matrix from nested rows.
    ///
    /// # Panics
    ///
    /// Panics if the rows have unequal lengths. Intended for literals in
    /// tests and small fixtures where the shape is known by construction.
    #[must_use]
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "all rows must have equal length");
            data.extend_from_slice(row);
        }
        DenseMatrix { rows: r, cols: c, data }
    }

    /// Creates a matrix by evaluating `f(i, j)` at every position.
    #[must_use]
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = DenseMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Creates the `n x n` identity matrix.
    #[must_use]
    pub fn identity(n: usize) -> Self {
        DenseMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Number of rows.
    #[must_use]
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of columns.
    #[must_use]
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Flat row-major view of the data.
    #[must_use]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable flat row-major view of the data.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Returns the entry at `(i, j)`.
    #[inline]
    #[must_use]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    /// Sets the entry at `(i, j)`.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    /// Borrows row `i` as a slice.
    #[inline]
    #[must_use]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Mutably borrows row `i`.
    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Matrix product `self * other` using an i-k-j loop order so the
    /// innermost loop streams contiguous rows of both operands.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] if `self.cols != other.rows`.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} * {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a_ik) in a_row.iter().enumerate() {
                if a_ik == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a_ik * b;
                }
            }
        }
        Ok(out)
    }

    /// Computes `selfᵀ * other` without materializing the transpose.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] if `self.rows != other.rows`.
    pub fn matmul_tn(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "matmul_tn",
                format!(
                    "{}x{} (transposed) * {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = DenseMatrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a_ki) in a_row.iter().enumerate() {
                if a_ki == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a_ki * b;
                }
            }
        }
        Ok(out)
    }

    /// Computes `self * otherᵀ` without materializing the transpose.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] if `self.cols != other.cols`.
    pub fn matmul_nt(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_nt",
                format!(
                    "{}x{} * {}x{} (transposed)",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        Ok(out)
    }

    /// Returns the transposed matrix.
    #[must_use]
    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Applies `f` to every entry, returning a new matrix.
    #[must_use]
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Adds `other` into `self` in place.
    ///
    /// # Panics
    ///
    /// Panics if the shapes differ.
    pub fn add_assign(&mut self, other: &DenseMatrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds `scale * other` into `self` in place.
    ///
    /// # Panics
    ///
    /// Panics if the shapes differ.
    pub fn add_scaled_assign(&mut self, scale: f64, other: &DenseMatrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    /// Frobenius norm: square root of the sum of squared entries.
    #[must_use]
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest Euclidean norm over the rows.
    #[must_use]
    pub fn max_row_norm(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Largest absolute entry.
    #[must_use]
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    /// `true` when every entry is finite.
    #[must_use]
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of entries with absolute value strictly greater than `eps`.
    #[must_use]
    pub fn l0_count(&self, eps: f64) -> usize {
        self.data.iter().filter(|v| v.abs() > eps).count()
    }
}

/// Compressed-sparse-row matrix of `f64`.
///
/// Invariant: within each row, column indices are strictly increasing, so
/// every `(row, col)` position is stored at most once.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a CSR matrix from `(row, col, value)` triplets.
    ///
    /// Triplets may arrive in any order; duplicates for the same position
    /// are summed. Explicit zeros are kept (use [`CsrMatrix::l0_count`]
    /// for tolerance-aware counting).
    ///
    /// # Errors
    ///
    /// Returns [`Error::Invalid`] if any index is out of bounds.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        for &(r, c, _) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(Error::invalid(format!(
                    "triplet ({r}, {c}) out of bounds for {n_rows}x{n_cols} matrix"
                )));
            }
        }
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));

        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(sorted.len());
        for (r, c, v) in sorted {
            match merged.last_mut() {
                Some(&mut (lr, lc, ref mut lv)) if lr == r && lc == c => *lv += v,
                _ => merged.push((r, c, v)),
            }
        }

        let mut row_ptr = vec![0usize; n_rows + 1];
        for &(r, _, _) in &merged {
            row_ptr[r + 1] += 1;
        }
        for i in 0..n_rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = merged.iter().map(|&(_, c, _)| c).collect();
        let values = merged.iter().map(|&(_, _, v)| v).collect();
        Ok(CsrMatrix {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Creates the `n x n` sparse identity.
    #[must_use]
    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            n_rows: n,
            n_cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Number of rows.
    #[must_use]
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    /// Number of columns.
    #[must_use]
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Number of stored entries.
    #[must_use]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Row pointer array (`n_rows + 1` entries).
    #[must_use]
    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    /// Column indices, parallel to [`CsrMatrix::values`].
    #[must_use]
    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    /// Stored values, parallel to [`CsrMatrix::col_idx`].
    #[must_use]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable view of the stored values (sparsity pattern is fixed).
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Iterates over `(col, value)` pairs of row `i`.
    pub fn row_entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let start = self.row_ptr[i];
        let end = self.row_ptr[i + 1];
        self.col_idx[start..end]
            .iter()
            .copied()
            .zip(self.values[start..end].iter().copied())
    }

    /// Sparse-dense product `self * dense`.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] if `self.n_cols != dense.rows()`.
    pub fn spmm(&self, dense: &DenseMatrix) -> Result<DenseMatrix> {
        if self.n_cols != dense.rows() {
            return Err(Error::shape(
                "spmm",
                format!(
                    "{}x{} * {}x{}",
                    self.n_rows,
                    self.n_cols,
                    dense.rows(),
                    dense.cols()
                ),
            ));
        }
        let c = dense.cols();
        let mut out = DenseMatrix::zeros(self.n_rows, c);
        for i in 0..self.n_rows {
            let out_row = &mut out.data[i * c..(i + 1) * c];
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                let v = self.values[idx];
                if v == 0.0 {
                    continue;
                }
                let d_row = dense.row(self.col_idx[idx]);
                for (o, &d) in out_row.iter_mut().zip(d_row) {
                    *o += v * d;
                }
            }
        }
        Ok(out)
    }

    /// Sparse matrix-vector product `self * x`.
    ///
    /// # Panics
    ///
    /// Panics if `x.len() != self.n_cols` or `out.len() != self.n_rows`.
    pub fn spmv(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols);
        assert_eq!(out.len(), self.n_rows);
        for i in 0..self.n_rows {
            let mut acc = 0.0;
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[idx] * x[self.col_idx[idx]];
            }
            out[i] = acc;
        }
    }

    /// Transposed sparse matrix-vector product `selfᵀ * x`.
    ///
    /// # Panics
    ///
    /// Panics if `x.len() != self.n_rows` or `out.len() != self.n_cols`.
    pub fn spmv_t(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.n_rows);
        assert_eq!(out.len(), self.n_cols);
        out.fill(0.0);
        for i in 0..self.n_rows {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[self.col_idx[idx]] += self.values[idx] * xi;
            }
        }
    }

    /// Returns the transposed matrix in CSR form.
    #[must_use]
    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for i in 0..self.n_cols {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0f64; self.nnz()];
        let mut next = counts;
        for r in 0..self.n_rows {
            for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[idx];
                let pos = next[c];
                next[c] += 1;
                col_idx[pos] = r;
                values[pos] = self.values[idx];
            }
        }
        CsrMatrix {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Densifies the matrix. Intended for tests and small diagnostics.
    #[must_use]
    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                out.set(i, self.col_idx[idx], self.values[idx]);
            }
        }
        out
    }

    /// Frobenius norm over the stored values.
    #[must_use]
    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute stored value.
    #[must_use]
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    /// Number of stored entries with absolute value strictly greater
    /// than `eps`.
    #[must_use]
    pub fn l0_count(&self, eps: f64) -> usize {
        self.values.iter().filter(|v| v.abs() > eps).count()
    }
}

/// Outcome of a power-iteration spectral-norm estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralNorm {
    /// Estimated largest singular value (last iterate if not converged).
    pub value: f64,
    /// Whether successive estimates got within tolerance before the
    /// iteration budget ran out.
    pub converged: bool,
    /// Number of iterations performed.
    pub iterations: usize,
}

/// Power iteration on `mᵀm`, shared by the dense and sparse entry points.
///
/// `matvec` computes `m * x`, `rmatvec` computes `mᵀ * y`. The starting
/// vector is the normalized all-ones vector, which keeps runs reproducible
/// without threading an RNG through every caller.
fn power_iteration(
    rows: usize,
    cols: usize,
    matvec: impl Fn(&[f64], &mut [f64]),
    rmatvec: impl Fn(&[f64], &mut [f64]),
    max_iter: usize,
    tol: f64,
) -> SpectralNorm {
    if rows == 0 || cols == 0 {
        return SpectralNorm {
            value: 0.0,
            converged: true,
            iterations: 0,
        };
    }
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut w = vec![0.0; rows];
    let mut s = vec![0.0; cols];
    let mut sigma = 0.0f64;
    for it in 1..=max_iter {
        matvec(&v, &mut w);
        let sigma_new = norm2(&w);
        if sigma_new == 0.0 {
            // v is in the null space; with the all-ones start this only
            // happens when every column sums to zero along v's support.
            // The estimate 0 is exact for the zero matrix and a lower
            // bound otherwise; report it as converged after restarting
            // would add RNG state for no practical gain at our sizes.
            return SpectralNorm {
                value: 0.0,
                converged: true,
                iterations: it,
            };
        }
        rmatvec(&w, &mut s);
        let ns = norm2(&s);
        if ns == 0.0 {
            return SpectralNorm {
                value: sigma_new,
                converged: true,
                iterations: it,
            };
        }
        for (vi, &si) in v.iter_mut().zip(&s) {
            *vi = si / ns;
        }
        if (sigma_new - sigma).abs() <= tol * sigma_new.max(1.0) {
            return SpectralNorm {
                value: sigma_new,
                converged: true,
                iterations: it,
            };
        }
        sigma = sigma_new;
    }
    SpectralNorm {
        value: sigma,
        converged: false,
        iterations: max_iter,
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Estimates the spectral norm (largest singular value) of a dense matrix.
///
/// Runs power iteration on `mᵀm` from the normalized all-ones vector and
/// stops when successive estimates differ by at most `tol` (relative to
/// the estimate, floored at 1). If the budget runs out the last estimate
/// is returned with `converged = false`.
#[must_use]
pub fn spectral_norm_dense(m: &DenseMatrix, max_iter: usize, tol: f64) -> SpectralNorm {
    power_iteration(
        m.rows(),
        m.cols(),
        |x, out| {
            for i in 0..m.rows() {
                let mut acc = 0.0;
                for (j, &xv) in x.iter().enumerate() {
                    acc += m.get(i, j) * xv;
                }
                out[i] = acc;
            }
        },
        |y, out| {
            out.fill(0.0);
            for i in 0..m.rows() {
                let yi = y[i];
                if yi == 0.0 {
                    continue;
                }
                for (j, o) in out.iter_mut().enumerate() {
                    *o += m.get(i, j) * yi;
                }
            }
        },
        max_iter,
        tol,
    )
}

/// Estimates the spectral norm (largest singular value) of a CSR matrix.
///
/// Same algorithm and stopping rule as [`spectral_norm_dense`].
#[must_use]
pub fn spectral_norm_sparse(m: &CsrMatrix, max_iter: usize, tol: f64) -> SpectralNorm {
    power_iteration(
        m.n_rows(),
        m.n_cols(),
        |x, out| m.spmv(x, out),
        |y, out| m.spmv_t(y, out),
        max_iter,
        tol,
    )
}

/// Full eigendecomposition of a small symmetric matrix by cyclic Jacobi
/// rotations.
///
/// Returns eigenvalues in ascending order and a matrix whose `j`-th
/// column is the eigenvector for the `j`-th eigenvalue, so that
/// `m ≈ V diag(λ) Vᵀ`.
///
/// # Arguments
///
/// * `m` - square symmetric matrix, at most 512 x 512
/// * `tol` - convergence threshold on the off-diagonal Frobenius norm
///
/// # Errors
///
/// Returns [`Error::Invalid`] if `m` is not square, is larger than
/// 512 x 512, or has an entry pair with `|m[i][j] - m[j][i]| > 1e-12`.
pub fn jacobi_eigh(m: &DenseMatrix, tol: f64) -> Result<(Vec<f64>, DenseMatrix)> {
    const MAX_N: usize = 512;
    const SYMMETRY_TOL: f64 = 1e-12;
    const MAX_SWEEPS: usize = 64;

    let n = m.rows();
    if m.cols() != n {
        return Err(Error::invalid(format!(
            "eigendecomposition requires a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if n > MAX_N {
        return Err(Error::invalid(format!(
            "eigendecomposition supports at most {MAX_N}x{MAX_N} matrices, got {n}x{n}"
        )));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (m.get(i, j) - m.get(j, i)).abs() > SYMMETRY_TOL {
                return Err(Error::invalid(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    m.get(i, j),
                    m.get(j, i)
                )));
            }
        }
    }

    let mut a = m.clone();
    // Work on the symmetrized copy so the 1e-12 slack cannot accumulate.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, avg);
            a.set(j, i, avg);
        }
    }
    let mut v = DenseMatrix::identity(n);

    for _sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += 2.0 * a.get(i, j) * a.get(i, j);
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                // Classic two-sided rotation choosing the smaller angle.
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a.get(i, i)
            .partial_cmp(&a.get(j, j))
            .expect("eigenvalues are finite")
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let eigenvectors = DenseMatrix::from_fn(n, n, |i, j| v.get(i, order[j]));
    Ok((eigenvalues, eigenvectors))
}
