//! Dense row-major `f64` matrices and the handful of primitives the
//! simulator needs: products, norms, slicing, thin Householder QR and
//! subspace diagnostics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that a basis has orthonormal columns.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for j in 0..self.cols {
                write!(f, "{:>12.6} ", self.get(i, j))?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::new(r, c, rows.iter().flat_map(|row| row.iter().copied()).collect())
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        matmul(self, rhs)
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        self.check_same_shape(other, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += factor * other`
    pub fn add_scaled_assign(&mut self, other: &Matrix, factor: f64) -> Result<()> {
        self.check_same_shape(other, "add_scaled_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|x| x * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
    }

    pub fn slice_cols(&self, first_n: usize) -> Result<Matrix> {
        slice_cols(self, first_n)
    }

    pub fn slice_rows(&self, first_n: usize) -> Result<Matrix> {
        slice_rows(self, first_n)
    }

    /// Rows `start..end`.
    pub fn row_range(&self, start: usize, end: usize) -> Result<Matrix> {
        if start >= end || end > self.rows {
            return Err(Error::OutOfRange {
                op: "row_range",
                requested: end,
                limit: self.rows,
            });
        }
        Matrix::new(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Columns `start..end`.
    pub fn col_range(&self, start: usize, end: usize) -> Result<Matrix> {
        if start >= end || end > self.cols {
            return Err(Error::OutOfRange {
                op: "col_range",
                requested: end,
                limit: self.cols,
            });
        }
        Ok(Matrix::from_fn(self.rows, end - start, |i, j| {
            self.get(i, start + j)
        }))
    }

    /// Embeds `self` into the top-left corner of a `rows x cols` zero matrix.
    pub fn zero_pad(&self, rows: usize, cols: usize) -> Result<Matrix> {
        if rows < self.rows || cols < self.cols {
            return Err(Error::ShapeMismatch {
                op: "zero_pad",
                lhs: self.shape(),
                rhs: (rows, cols),
            });
        }
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..self.rows {
            out.data[i * cols..i * cols + self.cols].copy_from_slice(self.row(i));
        }
        Ok(out)
    }

    /// Top-left `rows x cols` block.
    pub fn leading_block(&self, rows: usize, cols: usize) -> Result<Matrix> {
        self.slice_rows(rows)?.slice_cols(cols)
    }
}

/// Horizontal concatenation `[m_1 m_2 ...]`.
pub fn hstack(blocks: &[&Matrix]) -> Result<Matrix> {
    let first = blocks.first().ok_or(Error::Empty("hstack"))?;
    let rows = first.rows();
    let mut cols = 0;
    for b in blocks {
        if b.rows() != rows {
            return Err(Error::ShapeMismatch {
                op: "hstack",
                lhs: first.shape(),
                rhs: b.shape(),
            });
        }
        cols += b.cols();
    }
    let mut out = Matrix::zeros(rows, cols);
    let mut offset = 0;
    for b in blocks {
        for i in 0..rows {
            for j in 0..b.cols() {
                out.set(i, offset + j, b.get(i, j));
            }
        }
        offset += b.cols();
    }
    Ok(out)
}

/// Vertical concatenation.
pub fn vstack(blocks: &[&Matrix]) -> Result<Matrix> {
    let first = blocks.first().ok_or(Error::Empty("vstack"))?;
    let cols = first.cols();
    let mut data = Vec::new();
    for b in blocks {
        if b.cols() != cols {
            return Err(Error::ShapeMismatch {
                op: "vstack",
                lhs: first.shape(),
                rhs: b.shape(),
            });
        }
        data.extend_from_slice(b.as_slice());
    }
    Matrix::new(data.len() / cols, cols, data)
}

pub fn matmul(lhs: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if lhs.cols != rhs.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: lhs.shape(),
            rhs: rhs.shape(),
        });
    }
    let (n, m, p) = (lhs.rows, lhs.cols, rhs.cols);
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        let out_row = &mut out[i * p..(i + 1) * p];
        for k in 0..m {
            let a = lhs.data[i * m + k];
            if a == 0.0 {
                continue;
            }
            let rhs_row = &rhs.data[k * p..(k + 1) * p];
            for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                *o += a * b;
            }
        }
    }
    Ok(Matrix {
        rows: n,
        cols: p,
        data: out,
    })
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Copy of the leading `first_n` columns.
pub fn slice_cols(m: &Matrix, first_n: usize) -> Result<Matrix> {
    if first_n == 0 || first_n > m.cols {
        return Err(Error::OutOfRange {
            op: "slice_cols",
            requested: first_n,
            limit: m.cols,
        });
    }
    m.col_range(0, first_n)
}

/// Copy of the leading `first_n` rows.
pub fn slice_rows(m: &Matrix, first_n: usize) -> Result<Matrix> {
    if first_n == 0 || first_n > m.rows {
        return Err(Error::OutOfRange {
            op: "slice_rows",
            requested: first_n,
            limit: m.rows,
        });
    }
    m.row_range(0, first_n)
}

/// Thin QR by Householder reflections.
///
/// For an `m x n` input returns `Q` (`m x q`, orthonormal columns) and `R`
/// (`q x n`, upper triangular) with `q = min(m, n)`. The diagonal of `R` is
/// made nonnegative so the factorization is unique for full-rank input and
/// deterministic in every case.
pub fn thin_qr(m: &Matrix) -> (Matrix, Matrix) {
    let (rows, cols) = m.shape();
    let q = rows.min(cols);
    let mut work = m.clone();
    // Householder vectors, v_j acts on rows j..rows.
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(q);

    for j in 0..q {
        let norm_x = (j..rows).map(|i| work.get(i, j).powi(2)).sum::<f64>().sqrt();
        if norm_x == 0.0 {
            reflectors.push(None);
            continue;
        }
        let x0 = work.get(j, j);
        let alpha = if x0 >= 0.0 { -norm_x } else { norm_x };
        let mut v: Vec<f64> = (j..rows).map(|i| work.get(i, j)).collect();
        v[0] -= alpha;
        let v_norm_sq: f64 = v.iter().map(|x| x * x).sum();
        if v_norm_sq == 0.0 {
            reflectors.push(None);
            continue;
        }
        for c in j..cols {
            let dot: f64 = v
                .iter()
                .enumerate()
                .map(|(t, vt)| vt * work.get(j + t, c))
                .sum();
            let f = 2.0 * dot / v_norm_sq;
            for (t, vt) in v.iter().enumerate() {
                let cur = work.get(j + t, c);
                work.set(j + t, c, cur - f * vt);
            }
        }
        // Column j below the diagonal is now zero up to rounding.
        work.set(j, j, alpha);
        for i in (j + 1)..rows {
            work.set(i, j, 0.0);
        }
        reflectors.push(Some(v));
    }

    let mut r = Matrix::from_fn(q, cols, |i, c| if c >= i { work.get(i, c) } else { 0.0 });

    // Q = H_0 H_1 ... H_{q-1} applied to the first q columns of the identity.
    let mut qm = Matrix::from_fn(rows, q, |i, c| if i == c { 1.0 } else { 0.0 });
    for (j, refl) in reflectors.iter().enumerate().rev() {
        let Some(v) = refl else { continue };
        let v_norm_sq: f64 = v.iter().map(|x| x * x).sum();
        for c in 0..q {
            let dot: f64 = v
                .iter()
                .enumerate()
                .map(|(t, vt)| vt * qm.get(j + t, c))
                .sum();
            if dot == 0.0 {
                continue;
            }
            let f = 2.0 * dot / v_norm_sq;
            for (t, vt) in v.iter().enumerate() {
                let cur = qm.get(j + t, c);
                qm.set(j + t, c, cur - f * vt);
            }
        }
    }

    for i in 0..q {
        if r.get(i, i) < 0.0 {
            for c in 0..cols {
                r.set(i, c, -r.get(i, c));
            }
            for row in 0..rows {
                qm.set(row, i, -qm.get(row, i));
            }
        }
    }
    (qm, r)
}

/// `max |QᵀQ - I|` for the columns of `basis`.
pub fn orthonormality_deviation(basis: &Matrix) -> f64 {
    let gram = matmul(&basis.transpose(), basis).expect("gram shapes conform");
    let n = gram.rows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram.get(i, j) - target).abs());
        }
    }
    worst
}

/// Orthogonal projection `basis basisᵀ v` onto the column span of `basis`.
pub fn project_onto(basis: &Matrix, v: &Matrix) -> Result<Matrix> {
    if basis.rows() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "project_onto",
            lhs: basis.shape(),
            rhs: v.shape(),
        });
    }
    let coeffs = matmul(&basis.transpose(), v)?;
    matmul(basis, &coeffs)
}

/// Frobenius norm of `v - QQᵀv`: zero iff every column of `v` lies in
/// `colspan(basis)`. The basis must have orthonormal columns.
pub fn subspace_residual(basis: &Matrix, v: &Matrix) -> Result<f64> {
    let deviation = orthonormality_deviation(basis);
    if deviation > ORTHONORMAL_TOL {
        return Err(Error::NotOrthonormal { deviation });
    }
    let proj = project_onto(basis, v)?;
    Ok(frobenius_norm(&v.sub(&proj)?))
}
