//! Small dense row-major matrices.
//!
//! Dimensions in this crate are tiny (state dimension `n`, control dimension
//! `k`), so a plain `Vec`-backed matrix with Gauss-Jordan inversion and a
//! cyclic Jacobi eigensolver is all the linear algebra required. Hot loops in
//! the population simulator use the slice kernels at the bottom of the file
//! instead of allocating.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Result of a guarded inversion.
#[derive(Clone, Debug)]
pub struct Inverse<T> {
    pub inv: Mat<T>,
    /// 1-norm condition number estimate `‖A‖₁‖A⁻¹‖₁`.
    pub cond: T,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
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
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major buffer has wrong length");
        Self { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn col(v: &[T]) -> Self {
        Self { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    pub fn scalar(v: T) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn scale(&self, s: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| v * s).collect() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn column(&self, c: usize) -> Self {
        Self::from_fn(self.rows, 1, |r, _| self[(r, c)])
    }

    pub fn set_column(&mut self, c: usize, v: &Mat<T>) {
        assert_eq!(v.rows, self.rows);
        for r in 0..self.rows {
            self[(r, c)] = v[(r, 0)];
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn frobenius_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `½(A + Aᵀ)`.
    pub fn symmetrized(&self) -> Self {
        debug_assert!(self.is_square());
        let half = T::of(0.5);
        Self::from_fn(self.rows, self.cols, |r, c| half * (self[(r, c)] + self[(c, r)]))
    }

    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        for r in 0..self.rows {
            for c in 0..r {
                worst = worst.max((self[(r, c)] - self[(c, r)]).abs());
            }
        }
        worst
    }

    pub fn norm1(&self) -> T {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self[(r, c)].abs()).sum::<T>())
            .fold(T::zero(), T::max)
    }

    /// `vᵀ A v` for a column vector `v`.
    pub fn quad_form(&self, v: &[T]) -> T {
        debug_assert_eq!(v.len(), self.rows);
        let mut acc = T::zero();
        for r in 0..self.rows {
            let mut row = T::zero();
            for c in 0..self.cols {
                row += self[(r, c)] * v[c];
            }
            acc += v[r] * row;
        }
        acc
    }

    /// Gauss-Jordan inversion with partial pivoting. `None` on an exactly
    /// singular pivot or nonfinite result.
    pub fn inverse_with_cond(&self) -> Option<Inverse<T>> {
        assert!(self.is_square(), "inverse of a non-square matrix");
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = Self::identity(n);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[(i, col)].abs().partial_cmp(&a[(j, col)].abs()).unwrap())
                .unwrap();
            let p = a[(pivot, col)];
            if p == T::zero() || !p.is_finite() {
                return None;
            }
            if pivot != col {
                for c in 0..n {
                    a.data.swap(pivot * n + c, col * n + c);
                    inv.data.swap(pivot * n + c, col * n + c);
                }
            }
            let pinv = T::one() / p;
            for c in 0..n {
                a[(col, c)] *= pinv;
                inv[(col, c)] *= pinv;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a[(r, col)];
                if f == T::zero() {
                    continue;
                }
                for c in 0..n {
                    let ac = a[(col, c)];
                    let ic = inv[(col, c)];
                    a[(r, c)] -= f * ac;
                    inv[(r, c)] -= f * ic;
                }
            }
        }
        if !inv.is_finite() {
            return None;
        }
        let cond = self.norm1() * inv.norm1();
        Some(Inverse { inv, cond })
    }

    pub fn inverse(&self) -> Option<Self> {
        self.inverse_with_cond().map(|i| i.inv)
    }

    /// Eigenvalues of the symmetric part, ascending (cyclic Jacobi).
    pub fn sym_eigenvalues(&self) -> Vec<T> {
        assert!(self.is_square());
        let n = self.rows;
        let mut a = self.symmetrized();
        let eps = T::epsilon();
        for _sweep in 0..64 {
            let mut off = T::zero();
            for r in 0..n {
                for c in 0..n {
                    if r != c {
                        off += a[(r, c)] * a[(r, c)];
                    }
                }
            }
            if off <= eps * eps * a.frobenius_sq().max(T::min_positive_value()) {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    if apq == T::zero() {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (T::of(2.0) * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                    let c = T::one() / (t * t + T::one()).sqrt();
                    let s = t * c;
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
                }
            }
        }
        let mut ev: Vec<T> = (0..n).map(|i| a[(i, i)]).collect();
        ev.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
        ev
    }

    pub fn min_sym_eigenvalue(&self) -> T {
        self.sym_eigenvalues().first().copied().unwrap_or_else(T::zero)
    }

    /// `self · v` for a slice `v`, written into `out`.
    pub fn mul_vec_into(&self, v: &[T], out: &mut [T]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            out[r] = row.iter().zip(v).map(|(&a, &b)| a * b).sum();
        }
    }

    /// `out += self · v`.
    pub fn mul_vec_acc(&self, v: &[T], out: &mut [T]) {
        debug_assert_eq!(v.len(), self.cols);
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            out[r] += row.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>();
        }
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows];
        self.mul_vec_into(v, &mut out);
        out
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl<T: Scalar> Mul for &Mat<T> {
    type Output = Mat<T>;
    fn mul(self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch {:?} x {:?}", self.shape(), rhs.shape());
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == T::zero() {
                    continue;
                }
                for c in 0..rhs.cols {
                    out.data[r * rhs.cols + c] += a * rhs.data[k * rhs.cols + c];
                }
            }
        }
        out
    }
}

impl<T: Scalar> Add for &Mat<T> {
    type Output = Mat<T>;
    fn add(self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect(),
        }
    }
}

impl<T: Scalar> Sub for &Mat<T> {
    type Output = Mat<T>;
    fn sub(self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect(),
        }
    }
}

impl<T: Scalar> Neg for &Mat<T> {
    type Output = Mat<T>;
    fn neg(self) -> Mat<T> {
        self.map(|v| -v)
    }
}

impl<T: Scalar> AddAssign<&Mat<T>> for Mat<T> {
    fn add_assign(&mut self, rhs: &Mat<T>) {
        assert_eq!(self.shape(), rhs.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }
}

impl<T: Scalar> SubAssign<&Mat<T>> for Mat<T> {
    fn sub_assign(&mut self, rhs: &Mat<T>) {
        assert_eq!(self.shape(), rhs.shape(), "sub_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a -= b;
        }
    }
}

/// `y += a·x` on slices.
#[inline]
pub fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn norm_sq<T: Scalar>(x: &[T]) -> T {
    x.iter().map(|&v| v * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Mat<f64> {
        Mat::from_row_major(rows, cols, v.to_vec())
    }

    #[test]
    fn inverse_roundtrip() {
        let a = m(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, -1.0, 0.5, -1.0, 2.0]);
        let inv = a.inverse().unwrap();
        let prod = &a * &inv;
        assert!((&prod - &Mat::identity(3)).max_abs() < 1e-14);
    }

    #[test]
    fn inverse_needs_pivoting() {
        let a = m(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let inv = a.inverse_with_cond().unwrap();
        assert_eq!(inv.inv, a);
        assert!((inv.cond - 1.0).abs() < 1e-15);
    }

    #[test]
    fn singular_inverse_is_none() {
        assert!(m(2, 2, &[1.0, 2.0, 2.0, 4.0]).inverse().is_none());
    }

    #[test]
    fn jacobi_eigenvalues() {
        let a = m(3, 3, &[2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0]);
        let ev = a.sym_eigenvalues();
        let s2 = 2f64.sqrt();
        let expect = [2.0 - s2, 2.0, 2.0 + s2];
        for (e, x) in ev.iter().zip(expect) {
            assert!((e - x).abs() < 1e-12, "{e} vs {x}");
        }
    }

    #[test]
    fn f32_works() {
        let a: Mat<f32> = Mat::from_row_major(2, 2, vec![2.0, 0.0, 0.0, 4.0]);
        let inv = a.inverse().unwrap();
        assert_eq!(inv[(1, 1)], 0.25);
    }
}
