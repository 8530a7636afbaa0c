//! Compressed sparse row matrices with 64-bit weights.

use crate::error::{Error, Result};

/// CSR matrix. Column indices within a row are strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from raw CSR parts, validating structure.
    pub fn from_csr(
        rows: usize,
        cols: usize,
        offsets: Vec<usize>,
        indices: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if offsets.len() != rows + 1 || offsets[0] != 0 {
            return Err(Error::shape("csr", "offsets must have length rows + 1 and start at 0"));
        }
        if *offsets.last().unwrap() != indices.len() || indices.len() != values.len() {
            return Err(Error::shape("csr", "offsets, indices and values disagree"));
        }
        for r in 0..rows {
            let (lo, hi) = (offsets[r], offsets[r + 1]);
            if lo > hi {
                return Err(Error::shape("csr", format!("offsets decrease at row {r}")));
            }
            let row = &indices[lo..hi];
            if row.iter().any(|&c| c as usize >= cols) {
                return Err(Error::shape("csr", format!("column out of range in row {r}")));
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::shape("csr", format!("row {r} columns not strictly increasing")));
            }
        }
        Ok(Self {
            rows,
            cols,
            offsets,
            indices,
            values,
        })
    }

    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(u32, u32, f64)>) -> Result<Self> {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut offsets = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(u32, u32)> = None;
        for (r, c, v) in triplets {
            if r as usize >= rows || c as usize >= cols {
                return Err(Error::shape("csr", format!("triplet ({r},{c}) outside {rows}x{cols}")));
            }
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            offsets[r as usize + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            offsets[r + 1] += offsets[r];
        }
        Self::from_csr(rows, cols, offsets, indices, values)
    }

    /// Dense row-major matrix to CSR, dropping exact zeros.
    pub fn from_dense_rows(rows: usize, cols: usize, data: impl IntoIterator<Item = f64>) -> Self {
        let mut offsets = Vec::with_capacity(rows + 1);
        offsets.push(0);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        let mut it = data.into_iter();
        for _ in 0..rows {
            for c in 0..cols {
                let v = it.next().unwrap_or(0.0);
                if v != 0.0 {
                    indices.push(c as u32);
                    values.push(v);
                }
            }
            offsets.push(indices.len());
        }
        Self {
            rows,
            cols,
            offsets,
            indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            offsets: (0..=n).collect(),
            indices: (0..n as u32).collect(),
            values: vec![1.0; n],
        }
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

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (lo, hi) = (self.offsets[r], self.offsets[r + 1]);
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, vals) = self.row(r);
        match idx.binary_search(&(c as u32)) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// `self · x` for a dense row-major `x` with `width` columns.
    pub fn matmul_dense(&self, x: &[f64], width: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols * width);
        let mut out = vec![0.0; self.rows * width];
        for r in 0..self.rows {
            let dst = &mut out[r * width..(r + 1) * width];
            let (idx, vals) = self.row(r);
            for (&c, &w) in idx.iter().zip(vals) {
                let src = &x[c as usize * width..(c as usize + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// `selfᵀ · g` for a dense row-major `g` with `width` columns.
    pub fn transpose_matmul_dense(&self, g: &[f64], width: usize) -> Vec<f64> {
        debug_assert_eq!(g.len(), self.rows * width);
        let mut out = vec![0.0; self.cols * width];
        for r in 0..self.rows {
            let src = &g[r * width..(r + 1) * width];
            let (idx, vals) = self.row(r);
            for (&c, &w) in idx.iter().zip(vals) {
                let dst = &mut out[c as usize * width..(c as usize + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Whether the stored pattern and values are exactly symmetric.
    pub fn is_symmetric(&self) -> bool {
        if self.rows != self.cols {
            return false;
        }
        (0..self.rows).all(|r| {
            let (idx, vals) = self.row(r);
            idx.iter()
                .zip(vals)
                .all(|(&c, &v)| self.get(c as usize, r).to_bits() == v.to_bits())
        })
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                out[r * self.cols + c as usize] = v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let m = SparseMatrix::from_triplets(2, 3, vec![(1, 2, 1.0), (0, 1, 2.0), (1, 2, 0.5)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(1, 2), 1.5);
        assert_eq!(m.get(0, 1), 2.0);
        assert_eq!(m.get(0, 0), 0.0);
    }

    #[test]
    fn transpose_product_matches_dense() {
        let m = SparseMatrix::from_triplets(3, 2, vec![(0, 0, 1.0), (1, 1, 2.0), (2, 0, -3.0)]).unwrap();
        let g = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 3x2
        let got = m.transpose_matmul_dense(&g, 2);
        // mᵀ is 2x3: [[1,0,-3],[0,2,0]]
        assert_eq!(got, vec![1.0 - 15.0, 2.0 - 18.0, 6.0, 8.0]);
    }

    #[test]
    fn rejects_unsorted_rows() {
        assert!(SparseMatrix::from_csr(1, 3, vec![0, 2], vec![2, 1], vec![1.0, 1.0]).is_err());
    }
}
