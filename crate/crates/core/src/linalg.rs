//! Dense double-precision kernels used by the analysis modules.
//!
//! Storage is single precision on disk, but every analysis runs in `f64`:
//! canonical correlations close to 1.0 are the quantities of interest and
//! single precision smears them.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("SVD did not converge after {sweeps} Jacobi sweeps")]
    ConvergenceFailure { sweeps: usize },
    #[error("QR requires rows >= cols, got {rows}x{cols}")]
    WideMatrix { rows: usize, cols: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Build from nested rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Columns `0..k`.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        assert!(k <= self.cols);
        Matrix::from_fn(self.rows, k, |r, c| self[(r, c)])
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_columns(&self, indices: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, indices.len(), |r, c| self[(r, indices[c])])
    }

    /// Largest absolute entry; 0 for an empty matrix.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(LinalgError::NonFinite {
                row: i / self.cols.max(1),
                col: i % self.cols.max(1),
            }),
        }
    }

    /// Entry-wise `self - other`.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LinalgError::ShapeMismatch(format!(
                "{:?} - {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LinalgError::ShapeMismatch(format!(
                "{:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            Operand::new(&self.data, self.cols, false),
            Operand::new(&other.data, other.cols, false),
            &mut out.data,
            0.0,
        );
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(LinalgError::ShapeMismatch(format!(
                "{:?}ᵀ x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(
            self.cols,
            self.rows,
            other.cols,
            Operand::new(&self.data, self.cols, true),
            Operand::new(&other.data, other.cols, false),
            &mut out.data,
            0.0,
        );
        Ok(out)
    }

    /// Multiply every column `j` by `scale[j]`.
    pub fn scale_columns(&self, scale: &[f64]) -> Matrix {
        assert_eq!(scale.len(), self.cols);
        Matrix::from_fn(self.rows, self.cols, |r, c| self[(r, c)] * scale[c])
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (m, v) in means.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        let n = self.rows.max(1) as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// A row-major buffer viewed either as stored or transposed.
#[derive(Clone, Copy)]
pub struct Operand<'a> {
    data: &'a [f64],
    /// Row length of the buffer as stored.
    stride: usize,
    transposed: bool,
}

impl<'a> Operand<'a> {
    pub fn new(data: &'a [f64], stride: usize, transposed: bool) -> Self {
        Self {
            data,
            stride,
            transposed,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.stride as isize)
        } else {
            (self.stride as isize, 1)
        }
    }
}

/// `c = a·b + beta·c` for an `m×k` left operand and `k×n` right operand, `c`
/// row-major `m×n`.
pub fn gemm(m: usize, k: usize, n: usize, a: Operand<'_>, b: Operand<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.data.len() >= m * k && b.data.len() >= k * n);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: strides describe in-bounds views of the slices checked above,
    // and `c` is an exclusively borrowed m×n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Subtract each column's mean.
pub fn center_columns(a: &Matrix) -> Matrix {
    let means = a.column_means();
    let mut out = a.clone();
    for r in 0..out.rows {
        for (v, m) in out.row_mut(r).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    out
}

/// Thin QR factorization of a tall matrix.
#[derive(Debug, Clone)]
pub struct Qr {
    /// rows×cols, orthonormal columns.
    pub q: Matrix,
    /// cols×cols, upper triangular.
    pub r: Matrix,
    /// Set when some |r_ii| falls below `rank_tolerance`.
    pub rank_deficient: bool,
    pub rank_tolerance: f64,
}

/// Householder QR. Rank deficiency is reported, not fatal.
pub fn qr(a: &Matrix) -> Result<Qr> {
    let (m, n) = a.shape();
    if m < n {
        return Err(LinalgError::WideMatrix { rows: m, cols: n });
    }
    a.check_finite()?;

    // Column-major working copy: Householder updates touch whole columns.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| a.column(c)).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);

    for j in 0..n {
        let x = &cols[j][j..];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = x.to_vec();
        if norm > 0.0 {
            let alpha = if x[0] >= 0.0 { -norm } else { norm };
            v[0] -= alpha;
            let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
            if vnorm > 0.0 {
                v.iter_mut().for_each(|t| *t /= vnorm);
            } else {
                v.iter_mut().for_each(|t| *t = 0.0);
            }
        } else {
            v.iter_mut().for_each(|t| *t = 0.0);
        }
        for col in cols.iter_mut().skip(j) {
            apply_reflector(&v, &mut col[j..]);
        }
        reflectors.push(v);
    }

    let mut r = Matrix::zeros(n, n);
    for (c, col) in cols.iter().enumerate() {
        for row in 0..=c {
            r[(row, c)] = col[row];
        }
    }

    // Q = H_0 H_1 ... H_{n-1} applied to the first n unit vectors.
    let mut q_cols: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; m];
            e[c] = 1.0;
            e
        })
        .collect();
    for j in (0..n).rev() {
        for qc in q_cols.iter_mut() {
            apply_reflector(&reflectors[j], &mut qc[j..]);
        }
    }
    let q = Matrix::from_fn(m, n, |row, c| q_cols[c][row]);

    let max_diag = (0..n).fold(0.0f64, |acc, i| acc.max(r[(i, i)].abs()));
    let rank_tolerance = (m.max(n) as f64) * f64::EPSILON * max_diag.max(f64::MIN_POSITIVE);
    let rank_deficient = max_diag == 0.0 || (0..n).any(|i| r[(i, i)].abs() <= rank_tolerance);

    Ok(Qr {
        q,
        r,
        rank_deficient,
        rank_tolerance,
    })
}

#[inline]
fn apply_reflector(v: &[f64], x: &mut [f64]) {
    let dot: f64 = v.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    if dot != 0.0 {
        for (xi, vi) in x.iter_mut().zip(v) {
            *xi -= 2.0 * dot * vi;
        }
    }
}

/// Thin SVD `A = U · diag(s) · Vᵀ` with `k = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// rows×k, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// k×cols, orthonormal rows.
    pub vt: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        self.u
            .scale_columns(&self.s)
            .matmul(&self.vt)
            .expect("svd factors have consistent shapes")
    }
}

const MAX_JACOBI_SWEEPS: usize = 80;

/// Singular value decomposition.
///
/// Tall inputs are first reduced with QR; the square triangular factor is
/// then diagonalized with one-sided (Hestenes) Jacobi rotations. Wide inputs
/// are handled through the transpose.
pub fn svd(a: &Matrix) -> Result<Svd> {
    a.check_finite()?;
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Ok(Svd {
            u: Matrix::zeros(m, 0),
            s: Vec::new(),
            vt: Matrix::zeros(0, n),
        });
    }
    if m < n {
        let t = svd(&a.transpose())?;
        return Ok(Svd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        });
    }

    let Qr { q, r, .. } = qr(a)?;
    let (u_r, s, v) = jacobi_square(&r)?;
    let u = q.matmul(&u_r)?;
    Ok(Svd {
        u,
        s,
        vt: v.transpose(),
    })
}

/// One-sided Jacobi on a square matrix. Returns (U, s, V) sorted by
/// descending singular value.
fn jacobi_square(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let n = a.rows();
    debug_assert_eq!(n, a.cols());
    // Work on columns of A·V.
    let mut w: Vec<Vec<f64>> = (0..n).map(|c| a.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    let tol = f64::EPSILON * n as f64;
    let mut converged = n < 2;
    for _ in 0..MAX_JACOBI_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (wp, wq) = (&w[p], &w[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..n {
                        alpha += wp[i] * wp[i];
                        beta += wq[i] * wq[i];
                        gamma += wp[i] * wq[i];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(LinalgError::ConvergenceFailure {
            sweeps: MAX_JACOBI_SWEEPS,
        });
    }

    let norms: Vec<f64> = w
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let s: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    let smax = s.first().copied().unwrap_or(0.0);
    let null_tol = smax * f64::EPSILON * n as f64;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (&i, &sv) in order.iter().zip(&s) {
        if sv > null_tol && sv > 0.0 {
            u_cols.push(w[i].iter().map(|x| x / sv).collect());
        } else {
            u_cols.push(vec![0.0; n]);
        }
    }
    // Columns for (numerically) zero singular values carry no information in
    // W; replace them with an orthonormal completion so UᵀU = I.
    let valid = s.iter().take_while(|&&sv| sv > null_tol && sv > 0.0).count();
    complete_orthonormal(&mut u_cols, valid);

    let u = Matrix::from_fn(n, n, |r, c| u_cols[c][r]);
    let v_sorted = Matrix::from_fn(n, n, |r, c| v[order[c]][r]);
    Ok((u, s, v_sorted))
}

#[inline]
fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Replace `cols[valid..]` with unit vectors orthogonal to everything before
/// them (modified Gram-Schmidt against the standard basis).
fn complete_orthonormal(cols: &mut [Vec<f64>], valid: usize) {
    let n = cols.first().map_or(0, Vec::len);
    let mut next = valid;
    let mut basis = 0;
    while next < cols.len() && basis < n {
        let mut cand = vec![0.0; n];
        cand[basis] = 1.0;
        basis += 1;
        for _ in 0..2 {
            for prev in cols[..next].iter() {
                let d: f64 = prev.iter().zip(&cand).map(|(a, b)| a * b).sum();
                for (c, p) in cand.iter_mut().zip(prev) {
                    *c -= d * p;
                }
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cand.iter_mut().for_each(|x| *x /= norm);
            cols[next] = cand;
            next += 1;
        }
    }
}
