//! Small dense linear algebra over [`Real`] scalars.
//!
//! Row-major storage. Sizes in this crate are modest (4x4 for control design,
//! a few hundred for GP Gram matrices), so the routines are plain loops.

use std::ops::{Index, IndexMut};

use thiserror::Error;

use crate::scalar::{lit, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix is singular to working precision")]
    Singular,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn diag(d: &[T]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &x) in d.iter().enumerate() {
            m[(i, i)] = x;
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] = out[(i, j)] + a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Frobenius norm.
    pub fn norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    pub fn max_abs(&self) -> T {
        crate::scalar::max_abs(&self.data)
    }

    pub fn symmetrize(&self) -> Self {
        self.add(&self.transpose()).scale(lit(0.5))
    }

    /// `vᵀ M v`.
    pub fn quad_form(&self, v: &[T]) -> T {
        dot(v, &self.matvec(v))
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| lit(x.value())).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero(), T::zero());
    for c in 0..chunks {
        let i = 4 * c;
        s0 = s0 + a[i] * b[i];
        s1 = s1 + a[i + 1] * b[i + 1];
        s2 = s2 + a[i + 2] * b[i + 2];
        s3 = s3 + a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in 4 * chunks..n {
        s = s + a[i] * b[i];
    }
    s
}

/// Lower Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky<T> {
    l: Mat<T>,
}

impl<T: Real> Cholesky<T> {
    pub fn new(a: &Mat<T>) -> Result<Self, LinalgError> {
        if !a.is_square() {
            return Err(LinalgError::Dimension(format!(
                "cholesky of {}x{} matrix",
                a.rows, a.cols
            )));
        }
        let n = a.rows;
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let d = a[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
            if !(d > T::zero()) || !d.is_finite() {
                return Err(LinalgError::NotPositiveDefinite {
                    pivot: j,
                    value: d.value(),
                });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in j + 1..n {
                let s = a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    /// Factorizes `A + jitter·I`, growing the jitter tenfold from `start` up
    /// to `max` until the factorization succeeds. Returns the jitter used.
    pub fn with_jitter(a: &Mat<T>, start: T, max: T) -> Result<(Self, T), LinalgError> {
        match Self::new(a) {
            Ok(c) => return Ok((c, T::zero())),
            Err(LinalgError::Dimension(d)) => return Err(LinalgError::Dimension(d)),
            Err(_) => {}
        }
        let mut jitter = start;
        let mut last = LinalgError::Singular;
        while jitter <= max {
            let mut shifted = a.clone();
            for i in 0..a.rows {
                shifted[(i, i)] = shifted[(i, i)] + jitter;
            }
            match Self::new(&shifted) {
                Ok(c) => return Ok((c, jitter)),
                Err(e) => last = e,
            }
            jitter = jitter * lit(10.0);
        }
        Err(last)
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    pub fn factor(&self) -> &Mat<T> {
        &self.l
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        let mut x = Vec::with_capacity(n);
        for i in 0..n {
            let s = b[i] - dot(&self.l.row(i)[..i], &x[..i]);
            x.push(s / self.l[(i, i)]);
        }
        x
    }

    /// Solves `Lᵀ x = b`.
    pub fn solve_upper(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            x[i] = x[i] / self.l[(i, i)];
            let xi = x[i];
            for k in 0..i {
                x[k] = x[k] - self.l[(i, k)] * xi;
            }
        }
        x
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        self.solve_upper(&self.solve_lower(b))
    }

    pub fn log_det(&self) -> T {
        (0..self.dim()).fold(T::zero(), |acc, i| acc + self.l[(i, i)].ln() + self.l[(i, i)].ln())
    }

    pub fn inverse(&self) -> Mat<T> {
        let n = self.dim();
        let mut inv = Mat::zeros(n, n);
        let mut e = vec![T::zero(); n];
        for j in 0..n {
            e[j] = T::one();
            let col = self.solve(&e);
            e[j] = T::zero();
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv.symmetrize()
    }
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn lu_solve<T: Real>(a: &Mat<T>, b: &[T]) -> Result<Vec<T>, LinalgError> {
    let n = a.rows;
    if !a.is_square() || b.len() != n {
        return Err(LinalgError::Dimension(format!(
            "lu_solve {}x{} with rhs {}",
            a.rows,
            a.cols,
            b.len()
        )));
    }
    let mut m = a.clone();
    let mut x = b.to_vec();
    let scale = m.max_abs().max(T::min_positive_value());
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| {
                m[(i, col)]
                    .abs()
                    .partial_cmp(&m[(j, col)].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(col);
        if !(m[(piv, col)].abs() > scale * T::epsilon()) {
            return Err(LinalgError::Singular);
        }
        if piv != col {
            for j in 0..n {
                let tmp = m[(col, j)];
                m[(col, j)] = m[(piv, j)];
                m[(piv, j)] = tmp;
            }
            x.swap(col, piv);
        }
        let p = m[(col, col)];
        for i in col + 1..n {
            let f = m[(i, col)] / p;
            if f == T::zero() {
                continue;
            }
            for j in col..n {
                m[(i, j)] = m[(i, j)] - f * m[(col, j)];
            }
            x[i] = x[i] - f * x[col];
        }
    }
    for i in (0..n).rev() {
        let s = x[i] - dot(&m.row(i)[i + 1..], &x[i + 1..]);
        x[i] = s / m[(i, i)];
    }
    Ok(x)
}

/// General inverse by column-wise LU solves.
pub fn inverse<T: Real>(a: &Mat<T>) -> Result<Mat<T>, LinalgError> {
    let n = a.rows;
    let mut inv = Mat::zeros(n, n);
    let mut e = vec![T::zero(); n];
    for j in 0..n {
        e[j] = T::one();
        let col = lu_solve(a, &e)?;
        e[j] = T::zero();
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    Ok(inv)
}

/// Determinant by elimination with partial pivoting.
pub fn determinant<T: Real>(a: &Mat<T>) -> T {
    assert!(a.is_square());
    let n = a.rows;
    let mut m = a.clone();
    let mut det = T::one();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| {
                m[(i, col)]
                    .abs()
                    .partial_cmp(&m[(j, col)].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(col);
        if m[(piv, col)] == T::zero() {
            return T::zero();
        }
        if piv != col {
            for j in 0..n {
                let tmp = m[(col, j)];
                m[(col, j)] = m[(piv, j)];
                m[(piv, j)] = tmp;
            }
            det = -det;
        }
        let p = m[(col, col)];
        det = det * p;
        for i in col + 1..n {
            let f = m[(i, col)] / p;
            for j in col..n {
                m[(i, j)] = m[(i, j)] - f * m[(col, j)];
            }
        }
    }
    det
}

/// Characteristic polynomial coefficients `[1, c1, ..., cn]` of
/// `det(sI − A)` via the Faddeev–LeVerrier recursion.
pub fn char_poly<T: Real>(a: &Mat<T>) -> Vec<T> {
    assert!(a.is_square());
    let n = a.rows;
    let mut coeffs = vec![T::one()];
    let mut m = Mat::zeros(n, n);
    let id = Mat::identity(n);
    for k in 1..=n {
        let c_prev = *coeffs.last().expect("non-empty");
        m = a.matmul(&m).add(&id.scale(c_prev));
        let am = a.matmul(&m);
        let trace = (0..n).fold(T::zero(), |s, i| s + am[(i, i)]);
        coeffs.push(-trace / lit(k as f64));
    }
    coeffs
}

/// Routh–Hurwitz test: true iff every root of the monic polynomial has a
/// strictly negative real part.
pub fn is_hurwitz_poly<T: Real>(coeffs: &[T]) -> bool {
    let n = coeffs.len();
    if n <= 1 {
        return true;
    }
    if coeffs.iter().any(|c| !(*c > T::zero())) {
        return false;
    }
    let mut prev: Vec<T> = coeffs.iter().step_by(2).copied().collect();
    let mut cur: Vec<T> = coeffs.iter().skip(1).step_by(2).copied().collect();
    for _ in 0..n.saturating_sub(2) {
        let lead = match cur.first() {
            Some(&c) if c > T::zero() => c,
            _ => return false,
        };
        let mut next = Vec::with_capacity(prev.len());
        for j in 0..prev.len().saturating_sub(1) {
            let b = if j + 1 < cur.len() { cur[j + 1] } else { T::zero() };
            next.push((lead * prev[j + 1] - prev[0] * b) / lead);
        }
        prev = cur;
        cur = next;
    }
    cur.first().map_or(true, |&c| c > T::zero())
}

/// True iff all eigenvalues of `a` have strictly negative real part.
pub fn is_hurwitz<T: Real>(a: &Mat<T>) -> bool {
    is_hurwitz_poly(&char_poly(a))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> Mat<f64> {
        let b = Mat::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        b.matmul(&b.transpose()).add(&Mat::identity(n))
    }

    #[test]
    fn cholesky_solve_matches_lu() {
        let a = spd(6);
        let b: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let x1 = Cholesky::new(&a).unwrap().solve(&b);
        let x2 = lu_solve(&a, &b).unwrap();
        for (u, v) in x1.iter().zip(&x2) {
            assert!((u - v).abs() < 1e-10);
        }
        let ax = a.matvec(&x1);
        for (u, v) in ax.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite_and_jitter_recovers() {
        let mut a = Mat::<f64>::identity(3);
        a[(2, 2)] = 0.0;
        assert!(matches!(
            Cholesky::new(&a),
            Err(LinalgError::NotPositiveDefinite { pivot: 2, .. })
        ));
        let (_, jitter) = Cholesky::with_jitter(&a, 1e-10, 1e-6).unwrap();
        assert!(jitter > 0.0 && jitter <= 1e-6);
    }

    #[test]
    fn log_det_and_inverse() {
        let a = spd(5);
        let c = Cholesky::new(&a).unwrap();
        assert!((c.log_det() - determinant(&a).ln()).abs() < 1e-10);
        let prod = a.matmul(&c.inverse());
        assert!(prod.sub(&Mat::identity(5)).max_abs() < 1e-10);
        let prod = a.matmul(&inverse(&a).unwrap());
        assert!(prod.sub(&Mat::identity(5)).max_abs() < 1e-10);
    }

    #[test]
    fn singular_lu() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert_eq!(lu_solve(&a, &[1.0, 1.0]), Err(LinalgError::Singular));
    }

    #[test]
    fn hurwitz_detection() {
        // (s+1)(s+2)(s+3) = s^3 + 6s^2 + 11s + 6
        assert!(is_hurwitz_poly(&[1.0, 6.0, 11.0, 6.0]));
        // (s-1)(s+2)
        assert!(!is_hurwitz_poly(&[1.0, 1.0, -2.0]));
        // s^2 + 1: marginal
        assert!(!is_hurwitz_poly(&[1.0, 0.0, 1.0]));
        let a = Mat::from_rows(&[vec![-1.0, 5.0], vec![0.0, -0.5]]);
        assert!(is_hurwitz(&a));
        let a = Mat::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0]]);
        assert!(!is_hurwitz(&a));
        let cp: Vec<f64> = char_poly(&Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]));
        assert!((cp[1] + 5.0).abs() < 1e-12 && (cp[2] - 5.0).abs() < 1e-12);
    }
}
