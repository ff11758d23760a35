//! Minimal dense matrix type, generic over the scalar so the same code runs
//! plain or gradient-tracked. Sizes here are tiny (state dimension, inducing
//! count), so everything is straightforward row-major loops.

use std::ops::{Index, IndexMut};

use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: Vec<Vec<S>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Mat {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn diag_from(values: &[S]) -> Self {
        let mut m = Mat::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<S> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn transpose(&self) -> Mat<S> {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Mat<S>) -> Mat<S> {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[S]) -> Vec<S> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|i| crate::scalar::dot(self.row(i), v))
            .collect()
    }

    pub fn add(&self, other: &Mat<S>) -> Mat<S> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat::from_fn(self.rows, self.cols, |i, j| self[(i, j)] + other[(i, j)])
    }

    pub fn sub(&self, other: &Mat<S>) -> Mat<S> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat::from_fn(self.rows, self.cols, |i, j| self[(i, j)] - other[(i, j)])
    }

    pub fn scale(&self, c: f64) -> Mat<S> {
        Mat::from_fn(self.rows, self.cols, |i, j| self[(i, j)].scale(c))
    }

    /// Lift a plain matrix into any scalar type (entries become constants).
    pub fn lift(src: &Mat<f64>) -> Mat<S> {
        Mat {
            rows: src.rows,
            cols: src.cols,
            data: src.data.iter().map(|&x| S::from_f64(x)).collect(),
        }
    }

    /// Primal values of every entry.
    pub fn values(&self) -> Mat<f64> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x.value()).collect(),
        }
    }

    pub fn max_abs_value(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.value().abs()))
    }
}

impl Mat<f64> {
    pub fn max_abs_diff(&self, other: &Mat<f64>) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl<S> Index<(usize, usize)> for Mat<S> {
    type Output = S;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &S {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<S> IndexMut<(usize, usize)> for Mat<S> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Lift a plain vector into any scalar type.
pub fn lift_vec<S: Scalar>(src: &[f64]) -> Vec<S> {
    src.iter().map(|&x| S::from_f64(x)).collect()
}

/// Primal values of a vector.
pub fn vec_values<S: Scalar>(v: &[S]) -> Vec<f64> {
    v.iter().map(|x| x.value()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_against_hand_result() {
        let a = Mat::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Mat::from_rows(vec![vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = a.matmul(&b);
        assert_eq!(c[(0, 0)], 19.0);
        assert_eq!(c[(0, 1)], 22.0);
        assert_eq!(c[(1, 0)], 43.0);
        assert_eq!(c[(1, 1)], 50.0);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Mat::from_rows(vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let t = a.transpose();
        assert_eq!(t.rows(), 3);
        assert_eq!(t[(2, 1)], 6.0);
        assert_eq!(t.transpose().max_abs_diff(&a), 0.0);
    }

    #[test]
    fn matvec_matches_matmul() {
        let a = Mat::from_rows(vec![vec![1.0, -1.0], vec![0.5, 2.0]]);
        let v = vec![3.0, 4.0];
        let got = a.matvec(&v);
        assert_eq!(got, vec![-1.0, 9.5]);
    }
}
