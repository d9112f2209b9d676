//! Small dense-matrix kernel: row-major `Mat`, an SPD newtype with
//! Cholesky/LDL factorizations, and a cyclic-Jacobi symmetric eigensolver.
//!
//! The model never exceeds a few dozen rows per factorization (R variables,
//! L factors), so everything here favours clarity and numerical care over
//! blocked performance. All factorizations are written against the lower
//! triangle.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Build from nested rows. Panics on ragged input: that is a programming
    /// error, not a data error.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(
            rows.iter().all(|row| row.len() == c),
            "ragged row lengths in Mat::from_rows"
        );
        Mat {
            rows: r,
            cols: c,
            data: rows.concat(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec dimension mismatch");
        self.data
            .chunks_exact(self.cols)
            .map(|row| dot(row, x))
            .collect()
    }

    /// `self^T * x` without materializing the transpose.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, x.len(), "tr_matvec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (row, &xi) in self.data.chunks_exact(self.cols).zip(x) {
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * xi;
            }
        }
        out
    }

    /// `self += scale * x x^T`. Used to accumulate scatter matrices.
    pub fn add_outer(&mut self, x: &[f64], scale: f64) {
        assert!(self.is_square() && self.rows == x.len());
        for i in 0..self.rows {
            let xi = x[i] * scale;
            let row = self.row_mut(i);
            for (r, &xj) in row.iter_mut().zip(x) {
                *r += xi * xj;
            }
        }
    }

    pub fn scale_mut(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert!(self.rows == other.rows && self.cols == other.cols);
        let mut out = self.clone();
        for (o, &v) in out.data.iter_mut().zip(&other.data) {
            *o += v;
        }
        out
    }

    /// Replace a square matrix by `(A + A^T) / 2`. Sums of outer products
    /// accumulate tiny asymmetries in floating point; this restores exact
    /// symmetry before a factorization.
    pub fn symmetrize_mut(&mut self) {
        assert!(self.is_square());
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let m = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = m;
                self[(j, i)] = m;
            }
        }
    }

    /// General inverse through Gauss-Jordan elimination with partial
    /// pivoting. Returns `None` when a pivot collapses relative to the
    /// matrix scale; callers translate that into their own error.
    pub fn inverse(&self) -> Option<Mat> {
        assert!(self.is_square());
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = Mat::identity(n);
        let scale = self
            .data
            .iter()
            .fold(0.0f64, |acc, &v| acc.max(v.abs()))
            .max(1.0);
        for col in 0..n {
            let pivot_row = (col..n)
                .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
                .unwrap();
            if a[(pivot_row, col)].abs() < 1e-12 * scale {
                return None;
            }
            if pivot_row != col {
                for j in 0..n {
                    let tmp = a[(col, j)];
                    a[(col, j)] = a[(pivot_row, j)];
                    a[(pivot_row, j)] = tmp;
                    let tmp = inv[(col, j)];
                    inv[(col, j)] = inv[(pivot_row, j)];
                    inv[(pivot_row, j)] = tmp;
                }
            }
            let p = a[(col, col)];
            for j in 0..n {
                a[(col, j)] /= p;
                inv[(col, j)] /= p;
            }
            for i in 0..n {
                if i == col {
                    continue;
                }
                let f = a[(i, col)];
                if f == 0.0 {
                    continue;
                }
                for j in 0..n {
                    a[(i, j)] -= f * a[(col, j)];
                    inv[(i, j)] -= f * inv[(col, j)];
                }
            }
        }
        Some(inv)
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert!(self.rows == other.rows && self.cols == other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |acc, (&a, &b)| acc.max((a - b).abs()))
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Symmetric positive-definite matrix. Construction checks symmetry (within
/// a relative tolerance of 1e-10) and stores the exactly symmetrized matrix;
/// positive definiteness is enforced lazily, by the factorizations.
#[derive(Debug, Clone)]
pub struct SpdMatrix(Mat);

impl SpdMatrix {
    pub fn new(mut m: Mat) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "SPD matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        for i in 0..m.rows() {
            for j in (i + 1)..m.cols() {
                let (a, b) = (m[(i, j)], m[(j, i)]);
                if (a - b).abs() > 1e-10 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "matrix is not symmetric: entry ({i},{j})={a} vs ({j},{i})={b}"
                    )));
                }
            }
        }
        m.symmetrize_mut();
        Ok(SpdMatrix(m))
    }

    /// Skip the symmetry check for matrices that are symmetric by
    /// construction (e.g. just symmetrized, or built entrywise).
    pub fn from_symmetric(m: Mat) -> Self {
        debug_assert!(m.is_square());
        SpdMatrix(m)
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut m = Mat::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        SpdMatrix(m)
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }

    /// Lower Cholesky factor `L` with `L L^T = A`. If the factorization
    /// stalls on a non-positive pivot, one retry is made after adding
    /// `1e-10 * trace / dim` to the diagonal — enough to rescue matrices
    /// that are PD in exact arithmetic but marginal in floating point.
    pub fn cholesky(&self) -> Result<Cholesky> {
        match cholesky_raw(&self.0) {
            Some(l) => Ok(Cholesky { l }),
            None => {
                let n = self.dim();
                let trace: f64 = (0..n).map(|i| self.0[(i, i)]).sum();
                let jitter = 1e-10 * trace.abs().max(1.0) / n as f64;
                let mut bumped = self.0.clone();
                for i in 0..n {
                    bumped[(i, i)] += jitter;
                }
                cholesky_raw(&bumped)
                    .map(|l| Cholesky { l })
                    .ok_or_else(|| Error::NotPositiveDefinite {
                        context: format!("Cholesky of {n}x{n} matrix, even after jitter {jitter:.3e}"),
                    })
            }
        }
    }

    /// Lower Cholesky factor with no jitter fallback: fails on the first
    /// non-positive pivot. Use this where a singular input must surface as
    /// an error instead of being nudged into factorizability.
    pub fn cholesky_strict(&self) -> Result<Cholesky> {
        cholesky_raw(&self.0)
            .map(|l| Cholesky { l })
            .ok_or_else(|| Error::NotPositiveDefinite {
                context: format!("strict Cholesky of {0}x{0} matrix", self.dim()),
            })
    }

    /// Strict LDL^T factorization: `A = L D L^T` with `L` unit lower
    /// triangular. No jitter — this is used where the factor itself carries
    /// meaning (the identification transform of the reference-cluster
    /// covariance), so silently perturbing the input is not acceptable.
    pub fn ldl(&self) -> Result<(Mat, Vec<f64>)> {
        let n = self.dim();
        let a = &self.0;
        let mut l = Mat::identity(n);
        let mut d = vec![0.0; n];
        for j in 0..n {
            let mut dj = a[(j, j)];
            for k in 0..j {
                dj -= l[(j, k)] * l[(j, k)] * d[k];
            }
            if dj <= 0.0 || !dj.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    context: format!("LDL pivot {dj:.3e} at column {j}"),
                });
            }
            d[j] = dj;
            for i in (j + 1)..n {
                let mut v = a[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)] * d[k];
                }
                l[(i, j)] = v / dj;
            }
        }
        Ok((l, d))
    }

    pub fn inverse(&self) -> Result<SpdMatrix> {
        Ok(SpdMatrix::from_symmetric(self.cholesky()?.inverse()))
    }
}

fn cholesky_raw(a: &Mat) -> Option<Mat> {
    let n = a.rows();
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[(i, i)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Lower Cholesky factor, with solves and inversion against it.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Mat,
}

impl Cholesky {
    pub fn lower(&self) -> &Mat {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Solve `A x = b` where `A = L L^T`.
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let y = solve_lower(&self.l, b);
        solve_lower_transpose(&self.l, &y)
    }

    pub fn solve_mat(&self, b: &Mat) -> Mat {
        let mut out = Mat::zeros(b.rows(), b.cols());
        for j in 0..b.cols() {
            let col: Vec<f64> = (0..b.rows()).map(|i| b[(i, j)]).collect();
            let x = self.solve_vec(&col);
            for i in 0..b.rows() {
                out[(i, j)] = x[i];
            }
        }
        out
    }

    /// `A^{-1}` as a dense symmetric matrix.
    pub fn inverse(&self) -> Mat {
        let n = self.dim();
        let mut inv = self.solve_mat(&Mat::identity(n));
        inv.symmetrize_mut();
        inv
    }

    /// `ln det A = 2 sum ln L_ii`.
    pub fn log_det(&self) -> f64 {
        (0..self.dim()).map(|i| 2.0 * self.l[(i, i)].ln()).sum()
    }
}

/// Forward substitution: solve `L y = b` for lower-triangular `L`.
pub fn solve_lower(l: &Mat, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    debug_assert_eq!(b.len(), n);
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l[(i, k)] * y[k];
        }
        y[i] = v / l[(i, i)];
    }
    y
}

/// Back substitution: solve `L^T x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Mat, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    debug_assert_eq!(b.len(), n);
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in (i + 1)..n {
            v -= l[(k, i)] * x[k];
        }
        x[i] = v / l[(i, i)];
    }
    x
}

/// Invert a lower-triangular matrix in place by forward substitution against
/// the identity. The result is again lower triangular.
pub fn invert_lower(l: &Mat) -> Result<Mat> {
    let n = l.rows();
    for i in 0..n {
        if l[(i, i)] == 0.0 || !l[(i, i)].is_finite() {
            return Err(Error::InvalidParameter(format!(
                "triangular inverse: zero or non-finite diagonal at {i}"
            )));
        }
    }
    let mut inv = Mat::zeros(n, n);
    for j in 0..n {
        inv[(j, j)] = 1.0 / l[(j, j)];
        for i in (j + 1)..n {
            let mut v = 0.0;
            for k in j..i {
                v -= l[(i, k)] * inv[(k, j)];
            }
            inv[(i, j)] = v / l[(i, i)];
        }
    }
    Ok(inv)
}

/// Full eigendecomposition of a symmetric matrix by the cyclic Jacobi
/// method. Returns eigenvalues in descending order and the matching
/// eigenvectors as the columns of the returned matrix. Each eigenvector is
/// normalized so its largest-magnitude entry is positive, which pins down
/// the sign ambiguity and keeps factor extraction deterministic.
pub fn symmetric_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    assert!(a.is_square(), "eigendecomposition needs a square matrix");
    let n = a.rows();
    let mut m = a.clone();
    m.symmetrize_mut();
    let mut v = Mat::identity(n);

    let norm: f64 = m.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * norm.max(1.0);

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if (2.0 * off).sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));

    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        // Largest-magnitude entry, first index on ties, sets the sign.
        let mut lead = 0;
        for i in 1..n {
            if v[(i, old_col)].abs() > v[(lead, old_col)].abs() {
                lead = i;
            }
        }
        let flip = if v[(lead, old_col)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[(i, new_col)] = flip * v[(i, old_col)];
        }
    }
    (eigenvalues, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "expected {b}, got {a} (tol {tol})");
    }

    #[test]
    fn cholesky_of_known_matrix() {
        let a = SpdMatrix::new(Mat::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]])).unwrap();
        let chol = a.cholesky().unwrap();
        let l = chol.lower();
        assert_close(l[(0, 0)], 2.0, 1e-12);
        assert_close(l[(1, 0)], 1.0, 1e-12);
        assert_close(l[(1, 1)], 2.0f64.sqrt(), 1e-12);
        assert_close(l[(0, 1)], 0.0, 0.0);
        assert_close(chol.log_det(), 8.0f64.ln(), 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite_matrix() {
        let a = SpdMatrix::new(Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]])).unwrap();
        let err = a.cholesky().unwrap_err();
        assert_eq!(err.code(), "NotPositiveDefinite");
    }

    #[test]
    fn cholesky_jitter_rescues_marginal_matrix() {
        // Singular in exact arithmetic; the diagonal bump makes it barely PD.
        let a = SpdMatrix::new(Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]])).unwrap();
        let chol = a.cholesky().unwrap();
        assert!(chol.lower()[(1, 1)] > 0.0);
    }

    #[test]
    fn ldl_of_known_matrix() {
        let a = SpdMatrix::new(Mat::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]])).unwrap();
        let (l, d) = a.ldl().unwrap();
        assert_close(l[(0, 0)], 1.0, 0.0);
        assert_close(l[(1, 0)], 0.5, 1e-15);
        assert_close(l[(1, 1)], 1.0, 0.0);
        assert_close(d[0], 4.0, 1e-15);
        assert_close(d[1], 2.0, 1e-15);
    }

    #[test]
    fn ldl_is_strict_about_zero_pivots() {
        let a = SpdMatrix::new(Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]])).unwrap();
        assert!(a.ldl().is_err());
    }

    #[test]
    fn spd_inverse_of_known_matrix() {
        let a = SpdMatrix::new(Mat::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]])).unwrap();
        let inv = a.inverse().unwrap();
        let expect = Mat::from_rows(&[vec![0.375, -0.25], vec![-0.25, 0.5]]);
        assert!(inv.as_mat().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn general_inverse_of_unit_lower_block() {
        let b = Mat::from_rows(&[vec![2.0, 0.0], vec![1.0, 1.0]]);
        let inv = b.inverse().unwrap();
        let expect = Mat::from_rows(&[vec![0.5, 0.0], vec![-0.5, 1.0]]);
        assert!(inv.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn general_inverse_detects_singularity() {
        let b = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(b.inverse().is_none());
    }

    #[test]
    fn triangular_inverse_matches_dense_inverse() {
        let l = Mat::from_rows(&[
            vec![2.0, 0.0, 0.0],
            vec![1.0, 3.0, 0.0],
            vec![-1.0, 0.5, 1.5],
        ]);
        let inv = invert_lower(&l).unwrap();
        let prod = l.matmul(&inv);
        assert!(prod.max_abs_diff(&Mat::identity(3)) < 1e-14);
        // Strictly upper part must stay zero.
        assert_eq!(inv[(0, 1)], 0.0);
        assert_eq!(inv[(0, 2)], 0.0);
        assert_eq!(inv[(1, 2)], 0.0);
    }

    #[test]
    fn spd_construction_rejects_asymmetry() {
        let m = Mat::from_rows(&[vec![1.0, 0.5], vec![0.6, 2.0]]);
        assert!(SpdMatrix::new(m).is_err());
    }

    #[test]
    fn eigen_of_two_by_two() {
        let a = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let (w, v) = symmetric_eigen(&a);
        assert_close(w[0], 3.0, 1e-12);
        assert_close(w[1], 1.0, 1e-12);
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        assert_close(v[(0, 0)], inv_sqrt2, 1e-12);
        assert_close(v[(1, 0)], inv_sqrt2, 1e-12);
        // Second eigenvector sign-fixed so its leading entry is positive.
        assert_close(v[(0, 1)], inv_sqrt2, 1e-12);
        assert_close(v[(1, 1)], -inv_sqrt2, 1e-12);
    }

    #[test]
    fn eigen_reconstructs_input() {
        let a = Mat::from_rows(&[
            vec![4.0, 1.0, 0.5],
            vec![1.0, 3.0, -0.25],
            vec![0.5, -0.25, 2.0],
        ]);
        let (w, v) = symmetric_eigen(&a);
        let mut recon = Mat::zeros(3, 3);
        for k in 0..3 {
            let col: Vec<f64> = (0..3).map(|i| v[(i, k)]).collect();
            recon.add_outer(&col, w[k]);
        }
        assert!(recon.max_abs_diff(&a) < 1e-10);
        assert!(w[0] >= w[1] && w[1] >= w[2]);
    }

    #[test]
    fn matvec_and_transpose_agree() {
        let a = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(a.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(a.tr_matvec(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
        assert_eq!(a.transpose().matvec(&[1.0, 1.0]), a.tr_matvec(&[1.0, 1.0]));
    }

    proptest! {
        #[test]
        fn cholesky_solve_roundtrip(seed_vals in proptest::collection::vec(-3.0f64..3.0, 9),
                                    b in proptest::collection::vec(-5.0f64..5.0, 3)) {
            // A = G G^T + I is always comfortably SPD.
            let g = Mat::from_rows(&[
                seed_vals[0..3].to_vec(),
                seed_vals[3..6].to_vec(),
                seed_vals[6..9].to_vec(),
            ]);
            let mut a = Mat::identity(3);
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        a[(i, j)] += g[(i, k)] * g[(j, k)];
                    }
                }
            }
            a.symmetrize_mut();
            let spd = SpdMatrix::from_symmetric(a.clone());
            let chol = spd.cholesky().unwrap();
            let x = chol.solve_vec(&b);
            let back = a.matvec(&x);
            for (got, want) in back.iter().zip(&b) {
                prop_assert!((got - want).abs() < 1e-8);
            }
            // L L^T reconstructs A.
            let l = chol.lower();
            let recon = l.matmul(&l.transpose());
            prop_assert!(recon.max_abs_diff(&a) < 1e-9);
        }

        #[test]
        fn ldl_reconstructs(seed_vals in proptest::collection::vec(-2.0f64..2.0, 9)) {
            let g = Mat::from_rows(&[
                seed_vals[0..3].to_vec(),
                seed_vals[3..6].to_vec(),
                seed_vals[6..9].to_vec(),
            ]);
            let mut a = Mat::identity(3);
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        a[(i, j)] += g[(i, k)] * g[(j, k)];
                    }
                }
            }
            a.symmetrize_mut();
            let spd = SpdMatrix::from_symmetric(a.clone());
            let (l, d) = spd.ldl().unwrap();
            let mut ld = l.clone();
            for j in 0..3 {
                for i in 0..3 {
                    ld[(i, j)] *= d[j];
                }
            }
            let recon = ld.matmul(&l.transpose());
            prop_assert!(recon.max_abs_diff(&a) < 1e-9);
            for j in 0..3 {
                prop_assert!(d[j] > 0.0);
                prop_assert_eq!(l[(j, j)], 1.0);
            }
        }

        #[test]
        fn eigenvectors_are_orthonormal(seed_vals in proptest::collection::vec(-2.0f64..2.0, 16)) {
            let mut a = Mat::zeros(4, 4);
            for i in 0..4 {
                for j in 0..4 {
                    a[(i, j)] = seed_vals[i * 4 + j];
                }
            }
            a.symmetrize_mut();
            let (_, v) = symmetric_eigen(&a);
            let vtv = v.transpose().matmul(&v);
            prop_assert!(vtv.max_abs_diff(&Mat::identity(4)) < 1e-9);
        }
    }
}
