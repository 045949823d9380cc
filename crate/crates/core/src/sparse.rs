//! Row-list sparse matrices.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

/// Sparse matrix stored as per-row lists of `(column, value)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMatrix {
    nrows: usize,
    ncols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl RowMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        RowMatrix {
            nrows,
            ncols,
            rows: vec![Vec::new(); nrows],
        }
    }

    /// Adds `value` at `(row, col)`, merging with an existing entry.
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        assert!(row < self.nrows && col < self.ncols, "index out of bounds");
        let r = &mut self.rows[row];
        match r.iter_mut().find(|(c, _)| *c == col) {
            Some(entry) => entry.1 += value,
            None => r.push((col, value)),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Number of stored entries with a nonzero value.
    pub fn nnz(&self) -> usize {
        self.rows
            .iter()
            .map(|r| r.iter().filter(|(_, v)| *v != 0.0).count())
            .sum()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.rows[row]
            .iter()
            .find(|(c, _)| *c == col)
            .map_or(0.0, |e| e.1)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&(c, v)| (c, f(v)))
                    .filter(|(_, v)| *v != 0.0)
                    .collect()
            })
            .collect();
        RowMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            rows,
        }
    }

    /// Columns `range` as a new matrix with shifted column indices.
    pub fn columns(&self, start: usize, count: usize) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                r.iter()
                    .filter(|(c, _)| (start..start + count).contains(c))
                    .map(|&(c, v)| (c - start, v))
                    .collect()
            })
            .collect();
        RowMatrix {
            nrows: self.nrows,
            ncols: count,
            rows,
        }
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols);
        DVector::from_iterator(
            self.nrows,
            self.rows
                .iter()
                .map(|r| r.iter().map(|&(c, v)| v * x[c]).sum()),
        )
    }

    /// `selfᵀ · y`.
    pub fn tr_mul_vec(&self, y: &DVector<f64>) -> DVector<f64> {
        assert_eq!(y.len(), self.nrows);
        let mut out = DVector::zeros(self.ncols);
        for (i, r) in self.rows.iter().enumerate() {
            for &(c, v) in r {
                out[c] += v * y[i];
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (i, r) in self.rows.iter().enumerate() {
            for &(c, v) in r {
                m[(i, c)] += v;
            }
        }
        m
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut out = RowMatrix::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)] != 0.0 {
                    out.rows[i].push((j, m[(i, j)]));
                }
            }
        }
        out
    }

    /// Coordinate text, one `row col value` line per nonzero (0-based).
    pub fn to_coordinate_text(&self) -> String {
        let mut s = String::new();
        for (i, r) in self.rows.iter().enumerate() {
            let mut sorted = r.clone();
            sorted.sort_by_key(|e| e.0);
            for (c, v) in sorted {
                if v != 0.0 {
                    writeln!(s, "{i} {c} {v:e}").unwrap();
                }
            }
        }
        s
    }
}

/// Coordinate text for a dense matrix, skipping exact zeros.
pub fn dense_coordinate_text(m: &DMatrix<f64>) -> String {
    RowMatrix::from_dense(m).to_coordinate_text()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_match_dense() {
        let mut a = RowMatrix::zeros(2, 3);
        a.push(0, 0, 1.0);
        a.push(0, 2, -2.0);
        a.push(1, 1, 3.0);
        a.push(1, 1, 1.0);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let d = a.to_dense();
        assert_eq!(a.mul_vec(&x), &d * &x);
        assert_eq!(a.tr_mul_vec(&y), d.transpose() * &y);
        assert_eq!(a.get(1, 1), 4.0);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.to_coordinate_text().lines().count(), 3);
        assert_eq!(RowMatrix::from_dense(&d).to_dense(), d);
    }

    #[test]
    fn column_slice() {
        let mut a = RowMatrix::zeros(1, 4);
        a.push(0, 1, 5.0);
        a.push(0, 3, 7.0);
        let s = a.columns(2, 2);
        assert_eq!(s.ncols(), 2);
        assert_eq!(s.get(0, 1), 7.0);
        assert_eq!(s.nnz(), 1);
    }
}
