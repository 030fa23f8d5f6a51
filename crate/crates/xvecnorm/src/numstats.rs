//! Dense linear algebra and moment statistics shared by all other modules.
//!
//! All numerics are double precision. Operations are pure functions on
//! immutable inputs; no internal mutability, safe to share across threads.

use crate::error::{Error, Result};

/// Row-major dense matrix of finite doubles.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
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

    /// Builds from row-major data; rejects shape mismatch and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite matrix entry at flat index {i}"
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        if rows.iter().any(|v| v.len() != c) {
            return Err(Error::invalid("ragged rows in matrix construction"));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    /// Diagonal square matrix from the given entries.
    pub fn diag(entries: &[f64]) -> Matrix {
        let n = entries.len();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = entries[i];
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        (0..self.rows)
            .map(|i| dot(self.row(i), v))
            .collect()
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    /// (A + Aᵀ)/2; used to remove floating-point asymmetry before eig/chol.
    pub fn symmetrized(&self) -> Matrix {
        assert_eq!(self.rows, self.cols);
        let mut m = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = 1.0 + self.max_abs();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self[(i, j)] - self[(j, i)]).abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Population moment summary of a sample set.
#[derive(Clone, Debug)]
pub struct MomentSummary {
    pub mean: Vec<f64>,
    pub covariance: Matrix,
    /// Per-dimension skewness m3/sigma^3 (0 for degenerate dimensions).
    pub skewness: Vec<f64>,
    /// Per-dimension excess kurtosis m4/sigma^4 - 3 (0 for degenerate dimensions).
    pub excess_kurtosis: Vec<f64>,
    /// True where a dimension has zero variance, so skew/kurt were forced to 0.
    pub degenerate: Vec<bool>,
}

/// Population (biased, divide-by-N) moments per dimension plus full covariance.
pub fn moments(samples: &[Vec<f64>]) -> Result<MomentSummary> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "moments requires at least 2 samples, got {n}"
        )));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::invalid("samples have inconsistent dimensions"));
    }

    let nf = n as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= nf;
    }

    let mut cov = Matrix::zeros(d, d);
    let mut m3 = vec![0.0; d];
    let mut m4 = vec![0.0; d];
    let mut centered = vec![0.0; d];
    for s in samples {
        for j in 0..d {
            centered[j] = s[j] - mean[j];
        }
        for i in 0..d {
            let ci = centered[i];
            let row = &mut cov.data[i * d..(i + 1) * d];
            for (r, cj) in row.iter_mut().zip(&centered) {
                *r += ci * cj;
            }
            let c2 = ci * ci;
            m3[i] += c2 * ci;
            m4[i] += c2 * c2;
        }
    }
    for v in &mut cov.data {
        *v /= nf;
    }

    let mut skewness = vec![0.0; d];
    let mut excess_kurtosis = vec![0.0; d];
    let mut degenerate = vec![false; d];
    for j in 0..d {
        let var = cov[(j, j)];
        if var <= 0.0 {
            degenerate[j] = true;
            continue;
        }
        let sigma = var.sqrt();
        skewness[j] = m3[j] / nf / (sigma * sigma * sigma);
        excess_kurtosis[j] = m4[j] / nf / (var * var) - 3.0;
    }

    Ok(MomentSummary {
        mean,
        covariance: cov,
        skewness,
        excess_kurtosis,
        degenerate,
    })
}

/// Off-diagonal Frobenius norm; Jacobi convergence measure.
fn off_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// matrix columns. Sign convention: the largest-magnitude component of each
/// eigenvector is positive (first such index on ties). Convergence: off-diagonal
/// norm below 1e-12 relative to the input norm, capped at 100 sweeps.
pub fn sym_eig(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if m.rows() != m.cols() {
        return Err(Error::invalid("sym_eig requires a square matrix"));
    }
    if !m.is_symmetric(1e-8) {
        return Err(Error::invalid("sym_eig requires a symmetric matrix"));
    }
    let n = m.rows();
    let mut a = m.symmetrized();
    let mut v = Matrix::identity(n);
    let tol = 1e-12 * (1.0 + a.frobenius());

    let mut converged = false;
    for _sweep in 0..100 {
        if off_norm(&a) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // A <- JᵀAJ with J the (p,q) rotation; A stays symmetric.
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
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
    if !converged && off_norm(&a) > tol {
        return Err(Error::numeric(
            "Jacobi eigensolver did not converge within 100 sweeps",
        ));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap());

    let mut values = Vec::with_capacity(n);
    let mut vectors = Matrix::zeros(n, n);
    for (out_col, &src_col) in order.iter().enumerate() {
        values.push(a[(src_col, src_col)]);
        let mut best = 0usize;
        for k in 1..n {
            if v[(k, src_col)].abs() > v[(best, src_col)].abs() {
                best = k;
            }
        }
        let flip = if v[(best, src_col)] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[(k, out_col)] = flip * v[(k, src_col)];
        }
    }
    Ok((values, vectors))
}

/// Cholesky factorization A = LLᵀ of a symmetric positive-definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Factorizes using the lower triangle of `a`.
    pub fn new(a: &Matrix) -> Result<Cholesky> {
        if a.rows() != a.cols() {
            return Err(Error::invalid("cholesky requires a square matrix"));
        }
        let n = a.rows();
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a[(i, j)];
                for k in 0..j {
                    sum -= l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if sum <= 0.0 {
                        return Err(Error::numeric(format!(
                            "non-positive-definite pivot at index {i}"
                        )));
                    }
                    l[(i, i)] = sum.sqrt();
                } else {
                    l[(i, j)] = sum / l[(j, j)];
                }
            }
        }
        Ok(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// ln det A = 2 Σ ln L_ii.
    pub fn logdet(&self) -> f64 {
        (0..self.l.rows()).map(|i| self.l[(i, i)].ln()).sum::<f64>() * 2.0
    }

    /// Solves A x = b for a single right-hand side.
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n, "cholesky solve dimension mismatch");
        // Forward substitution L y = b.
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.l[(i, k)] * y[k];
            }
            y[i] /= self.l[(i, i)];
        }
        // Back substitution Lᵀ x = y.
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                y[i] -= self.l[(k, i)] * y[k];
            }
            y[i] /= self.l[(i, i)];
        }
        y
    }

    /// Solves A X = B column by column.
    pub fn solve_mat(&self, b: &Matrix) -> Matrix {
        let n = self.dim();
        assert_eq!(b.rows(), n, "cholesky solve dimension mismatch");
        let bt = b.transpose();
        let mut xt = Matrix::zeros(b.cols(), n);
        for c in 0..b.cols() {
            let x = self.solve_vec(bt.row(c));
            for (j, v) in x.into_iter().enumerate() {
                xt[(c, j)] = v;
            }
        }
        xt.transpose()
    }

    /// xᵀ A⁻¹ x = ‖L⁻¹x‖², via one forward substitution.
    pub fn quadform(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        assert_eq!(x.len(), n, "quadform dimension mismatch");
        let mut y = x.to_vec();
        let mut q = 0.0;
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.l[(i, k)] * y[k];
            }
            y[i] /= self.l[(i, i)];
            q += y[i] * y[i];
        }
        q
    }
}

/// Solves A x = b (SPD A); returns the solution and ln det A.
pub fn chol_solve(a: &Matrix, b: &Matrix) -> Result<(Matrix, f64)> {
    let ch = Cholesky::new(a)?;
    Ok((ch.solve_mat(b), ch.logdet()))
}

pub const LN_2PI: f64 = 1.8378770664093453;

/// ln N(x; mean, A) with A prefactorized.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], chol: &Cholesky) -> f64 {
    let d = chol.dim() as f64;
    let centered: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    -0.5 * (d * LN_2PI + chol.logdet() + chol.quadform(&centered))
}
