//! Compressed sparse row matrices for plaintext linear maps.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

/// Incremental row-major builder. Entries within a row may come in any
/// order; duplicates are summed.
#[derive(Debug)]
pub struct SparseBuilder {
    m: SparseMatrix,
    row: Vec<(usize, f64)>,
}

impl SparseBuilder {
    pub fn new(cols: usize) -> Self {
        Self {
            m: SparseMatrix { rows: 0, cols, indptr: vec![0], indices: Vec::new(), values: Vec::new() },
            row: Vec::new(),
        }
    }

    pub fn push(&mut self, col: usize, v: f64) {
        assert!(col < self.m.cols, "column {col} out of range {}", self.m.cols);
        self.row.push((col, v));
    }

    pub fn finish_row(&mut self) {
        self.row.sort_by_key(|&(c, _)| c);
        let mut last: Option<usize> = None;
        for &(c, v) in &self.row {
            if last == Some(c) {
                *self.m.values.last_mut().expect("entry present") += v;
            } else {
                self.m.indices.push(c);
                self.m.values.push(v);
                last = Some(c);
            }
        }
        self.row.clear();
        self.m.rows += 1;
        self.m.indptr.push(self.m.indices.len());
    }

    pub fn build(self) -> SparseMatrix {
        assert!(self.row.is_empty(), "unfinished row");
        self.m
    }
}

impl SparseMatrix {
    pub fn identity(n: usize) -> Self {
        let mut b = SparseBuilder::new(n);
        for i in 0..n {
            b.push(i, 1.0);
            b.finish_row();
        }
        b.build()
    }

    /// Row-major dense input.
    pub fn from_dense(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols);
        let mut b = SparseBuilder::new(cols);
        for r in 0..rows {
            for (c, &v) in data[r * cols..(r + 1) * cols].iter().enumerate() {
                if v != 0.0 {
                    b.push(c, v);
                }
            }
            b.finish_row();
        }
        b.build()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Element count of the equivalent dense matrix.
    pub fn dense_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(cc, _)| cc == c).map_or(0.0, |(_, v)| v)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[r * self.cols + c] = v;
            }
        }
        out
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matrix has {} columns, vector {} entries", self.cols, x.len());
        (0..self.rows).map(|r| self.row(r).map(|(c, v)| v * x[c]).sum()).collect()
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &SparseMatrix) -> SparseMatrix {
        assert_eq!(self.cols, rhs.rows, "inner dimensions differ");
        let mut acc = vec![0.0; rhs.cols];
        let mut touched = vec![false; rhs.cols];
        let mut cols_in_row = Vec::new();
        let mut b = SparseBuilder::new(rhs.cols);
        for r in 0..self.rows {
            for (k, a) in self.row(r) {
                for (c, v) in rhs.row(k) {
                    if !touched[c] {
                        touched[c] = true;
                        cols_in_row.push(c);
                    }
                    acc[c] += a * v;
                }
            }
            cols_in_row.sort_unstable();
            for &c in &cols_in_row {
                if acc[c] != 0.0 {
                    b.push(c, acc[c]);
                }
                acc[c] = 0.0;
                touched[c] = false;
            }
            cols_in_row.clear();
            b.finish_row();
        }
        b.build()
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.values.iter_mut().for_each(|v| *v *= s);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_roundtrip_and_apply() {
        let d = [1.0, 0.0, 2.0, 0.0, 3.0, 0.0];
        let m = SparseMatrix::from_dense(2, 3, &d);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.to_dense(), d);
        assert_eq!(m.apply(&[1.0, 1.0, 1.0]), vec![3.0, 3.0]);
    }

    #[test]
    fn product_matches_dense() {
        let a = SparseMatrix::from_dense(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = SparseMatrix::from_dense(2, 3, &[0.0, 1.0, 0.0, 5.0, 0.0, 1.0]);
        assert_eq!(a.matmul(&b).to_dense(), vec![10.0, 1.0, 2.0, 20.0, 3.0, 4.0]);
    }

    #[test]
    fn duplicates_are_summed() {
        let mut b = SparseBuilder::new(2);
        b.push(1, 1.0);
        b.push(1, 2.0);
        b.finish_row();
        assert_eq!(b.build().get(0, 1), 3.0);
    }
}
