//! Dense row-major matrices with the small set of products training needs.
//!
//! All products are computed row-by-row with a fixed accumulation order, so
//! results are bit-identical regardless of how many Rayon workers run them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Row-major `rows x cols` matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One-hot encoding: row `r` has a single 1.0 at column `labels[r]`.
pub fn one_hot_rows(labels: &[usize], num_classes: usize) -> Matrix {
    let mut out = Matrix::zeros(labels.len(), num_classes);
    for (r, &label) in labels.iter().enumerate() {
        assert!(label < num_classes, "label {label} out of range for {num_classes} classes");
        out.set(r, label, 1.0);
    }
    out
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds from a flat row-major buffer; `data.len()` must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer does not match {rows}x{cols}");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix { rows: rows.len(), cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// Copies the given rows into a new matrix, in the order given.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// Stacks `self` on top of `other`; column counts must match.
    pub fn vstack(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "vstack column mismatch");
        let mut data = Vec::with_capacity((self.rows + other.rows) * self.cols);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Matrix { rows: self.rows + other.rows, cols: self.cols, data }
    }

    /// Concatenates columns of `self` and `other`; row counts must match.
    pub fn hstack(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "hstack row mismatch");
        let mut out = Matrix::zeros(self.rows, self.cols + other.cols);
        for r in 0..self.rows {
            out.row_mut(r)[..self.cols].copy_from_slice(self.row(r));
            out.row_mut(r)[self.cols..].copy_from_slice(other.row(r));
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self (n x k) * other (k x m)`, parallel over blocks of output rows.
    ///
    /// Within a block the shared panel of `other` rows stays cache-hot; the
    /// per-element accumulation order over `k` is the same as the naive triple
    /// loop, so blocking does not change results.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        let m = other.cols;
        let kdim = self.cols;
        const ROW_BLOCK: usize = 16;
        const K_BLOCK: usize = 128;
        out.data
            .par_chunks_mut(ROW_BLOCK * m)
            .zip(self.data.par_chunks(ROW_BLOCK * kdim))
            .for_each(|(oblock, ablock)| {
                let rows_here = ablock.len() / kdim;
                for k0 in (0..kdim).step_by(K_BLOCK) {
                    let k1 = (k0 + K_BLOCK).min(kdim);
                    for i in 0..rows_here {
                        let arow = &ablock[i * kdim..(i + 1) * kdim];
                        let orow = &mut oblock[i * m..(i + 1) * m];
                        for k in k0..k1 {
                            let a = arow[k];
                            if a != 0.0 {
                                let brow = &other.data[k * m..(k + 1) * m];
                                for (o, &b) in orow.iter_mut().zip(brow) {
                                    *o += a * b;
                                }
                            }
                        }
                    }
                }
            });
        out
    }

    /// `self (n x k) * otherᵀ` where `other` is `m x k`.
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimension mismatch");
        self.matmul(&other.transpose())
    }

    /// `selfᵀ * other` where `self` is `n x k` and `other` is `n x m`.
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dimension mismatch");
        let k = self.cols;
        let m = other.cols;
        let mut out = Matrix::zeros(k, m);
        out.data
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(c, orow)| {
                for r in 0..self.rows {
                    let a = self.data[r * k + c];
                    if a != 0.0 {
                        let brow = &other.data[r * m..(r + 1) * m];
                        for (o, &b) in orow.iter_mut().zip(brow) {
                            *o += a * b;
                        }
                    }
                }
            });
        out
    }

    /// Adds `row` to every row of `self`.
    pub fn add_row_broadcast(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols, "broadcast length mismatch");
        for r in self.data.chunks_exact_mut(self.cols) {
            for (v, &b) in r.iter_mut().zip(row) {
                *v += b;
            }
        }
    }

    /// Sums each column into a length-`cols` vector.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in self.data.chunks_exact(self.cols) {
            for (s, &v) in sums.iter_mut().zip(r) {
                *s += v;
            }
        }
        sums
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64 + Sync) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    pub fn scale(&mut self, s: f64) {
        self.map_inplace(|v| v * s);
    }
}
