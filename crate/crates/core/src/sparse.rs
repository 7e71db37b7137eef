//! Compressed-row sparse matrices.
//!
//! Column indices within a row are kept sorted so that every traversal (and
//! therefore every floating-point sum) happens in a fixed order.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SparseError {
    #[error("row {row}: column {col} out of range for {n}x{n} matrix")]
    ColumnOutOfRange { row: usize, col: usize, n: usize },
    #[error("vector length {got} does not match matrix dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
}

/// Square sparse matrix in compressed-row form.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicate entries are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self, SparseError> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(r, c, v) in triplets {
            if r >= n || c >= n {
                return Err(SparseError::ColumnOutOfRange { row: r, col: c, n });
            }
            rows[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                if last == Some(c) {
                    *values.last_mut().expect("previous entry") += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self { n, row_ptr, col_idx, values })
    }

    /// Builds a matrix from a dense row-major array, dropping exact zeros.
    pub fn from_dense(n: usize, dense: &[f64]) -> Result<Self, SparseError> {
        if dense.len() != n * n {
            return Err(SparseError::DimensionMismatch { expected: n * n, got: dense.len() });
        }
        let mut triplets = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let v = dense[i * n + j];
                if v != 0.0 {
                    triplets.push((i, j, v));
                }
            }
        }
        Self::from_triplets(n, &triplets)
    }

    pub fn zeros(n: usize) -> Self {
        Self { n, row_ptr: vec![0; n + 1], col_idx: Vec::new(), values: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates `(col, value)` over the stored entries of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[span.clone()].binary_search(&j) {
            Ok(p) => self.values[span.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, SparseError> {
        if x.len() != self.n {
            return Err(SparseError::DimensionMismatch { expected: self.n, got: x.len() });
        }
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        Ok(y)
    }

    pub(crate) fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[p] * x[self.col_idx[p]];
            }
            *yi = acc;
        }
    }

    /// `Y = A X` for a row-major `n x m` block `X`.
    pub fn matmat(&self, x: &[f64], m: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n * m);
        let mut y = vec![0.0; self.n * m];
        for i in 0..self.n {
            let yi = &mut y[i * m..(i + 1) * m];
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                let a = self.values[p];
                let xj = &x[self.col_idx[p] * m..(self.col_idx[p] + 1) * m];
                for (yv, xv) in yi.iter_mut().zip(xj) {
                    *yv += a * xv;
                }
            }
        }
        y
    }

    /// Largest `|a_ij - a_ji|` over stored entries.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[i * self.n + j] = v;
            }
        }
        d
    }

    /// Bytes held by the three storage arrays.
    pub fn storage_bytes(&self) -> usize {
        self.row_ptr.len() * std::mem::size_of::<usize>()
            + self.col_idx.len() * std::mem::size_of::<usize>()
            + self.values.len() * std::mem::size_of::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_are_sorted_and_summed() {
        let m = CsrMatrix::from_triplets(2, &[(0, 1, 1.0), (0, 0, 2.0), (0, 1, 0.5)]).unwrap();
        assert_eq!(m.get(0, 0), 2.0);
        assert_eq!(m.get(0, 1), 1.5);
        assert_eq!(m.get(1, 1), 0.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn matvec_matches_dense() {
        let dense = [1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0];
        let m = CsrMatrix::from_dense(3, &dense).unwrap();
        assert_eq!(m.matvec(&[1.0, 2.0, 3.0]).unwrap(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(m.to_dense(), dense.to_vec());
        assert_eq!(m.asymmetry(), 0.0);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(CsrMatrix::from_triplets(2, &[(0, 2, 1.0)]).is_err());
        let m = CsrMatrix::zeros(2);
        assert!(m.matvec(&[1.0]).is_err());
    }
}
