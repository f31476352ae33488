//! Compressed sparse row matrices used for the adjacency of real graphs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix<T> {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    /// Builds from `(row, col, value)` triplets. Duplicate coordinates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut triplets: Vec<(usize, usize, T)>) -> Result<Self> {
        for &(r, c, _) in &triplets {
            if r >= n_rows || c >= n_cols {
                return Err(Error::dim(
                    "csr",
                    format!("entry ({r},{c}) outside {n_rows}x{n_cols}"),
                ));
            }
        }
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<T> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry exists") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..n_rows {
            indptr[i + 1] += indptr[i];
        }
        Ok(Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            indptr: vec![0; n_rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.indptr[i + 1] - self.indptr[i]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let span = self.indptr[i]..self.indptr[i + 1];
        match self.indices[span.clone()].binary_search(&j) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => T::zero(),
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.n_rows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn row_sums(&self) -> Vec<T> {
        (0..self.n_rows).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn is_symmetric(&self) -> bool {
        self.n_rows == self.n_cols && self.triplets().all(|(i, j, v)| self.get(j, i) == v)
    }

    pub fn to_dense(&self) -> Tensor<T> {
        let mut data = vec![T::zero(); self.n_rows * self.n_cols];
        for (i, j, v) in self.triplets() {
            data[i * self.n_cols + j] = v;
        }
        Tensor::from_parts(self.n_rows, self.n_cols, data)
    }

    pub fn from_dense(dense: &Tensor<T>) -> Self {
        let mut trip = Vec::new();
        for i in 0..dense.rows() {
            for (j, &v) in dense.row(i).iter().enumerate() {
                if v != T::zero() {
                    trip.push((i, j, v));
                }
            }
        }
        Self::from_triplets(dense.rows(), dense.cols(), trip).expect("indices come from a valid tensor")
    }

    /// Returns `D_left · self · D_right` for diagonal scalings given as vectors.
    pub fn scale_sym(&self, left: &[T], right: &[T]) -> Self {
        let mut out = self.clone();
        for i in 0..self.n_rows {
            for p in self.indptr[i]..self.indptr[i + 1] {
                out.values[p] = self.values[p] * left[i] * right[self.indices[p]];
            }
        }
        out
    }

    /// Adds `value` on the diagonal (square matrices only).
    pub fn add_diagonal(&self, value: T) -> Result<Self> {
        if self.n_rows != self.n_cols {
            return Err(Error::dim("add_diagonal", "matrix is not square"));
        }
        let mut trip: Vec<_> = self.triplets().collect();
        trip.extend((0..self.n_rows).map(|i| (i, i, value)));
        Self::from_triplets(self.n_rows, self.n_cols, trip)
    }

    /// Sparse × dense product.
    pub fn matmul(&self, dense: &Tensor<T>) -> Result<Tensor<T>> {
        if dense.rows() != self.n_cols {
            return Err(Error::dim(
                "spmm",
                format!("{}x{} times {:?}", self.n_rows, self.n_cols, dense.shape()),
            ));
        }
        let f = dense.cols();
        let src = dense.data();
        let mut out = vec![T::zero(); self.n_rows * f];
        for i in 0..self.n_rows {
            let dst = &mut out[i * f..(i + 1) * f];
            for (j, v) in self.row(i) {
                for (o, &x) in dst.iter_mut().zip(&src[j * f..(j + 1) * f]) {
                    *o += v * x;
                }
            }
        }
        Ok(Tensor::from_parts(self.n_rows, f, out))
    }

    /// `selfᵀ × dense`.
    pub fn matmul_transposed(&self, dense: &Tensor<T>) -> Result<Tensor<T>> {
        if dense.rows() != self.n_rows {
            return Err(Error::dim(
                "spmm_t",
                format!("({}x{})^T times {:?}", self.n_rows, self.n_cols, dense.shape()),
            ));
        }
        let f = dense.cols();
        let src = dense.data();
        let mut out = vec![T::zero(); self.n_cols * f];
        for i in 0..self.n_rows {
            let s = &src[i * f..(i + 1) * f];
            for (j, v) in self.row(i) {
                for (o, &x) in out[j * f..(j + 1) * f].iter_mut().zip(s) {
                    *o += v * x;
                }
            }
        }
        Ok(Tensor::from_parts(self.n_cols, f, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed_and_products_match_dense() {
        let m = CsrMatrix::<f64>::from_triplets(2, 3, vec![(0, 1, 1.0), (0, 1, 2.0), (1, 2, 4.0)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 1), 3.0);
        let x = Tensor::<f64>::from_f64(3, 1, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.matmul(&x).unwrap().data(), &[6.0, 12.0]);
        let y = Tensor::<f64>::from_f64(2, 1, &[1.0, 1.0]).unwrap();
        assert_eq!(m.matmul_transposed(&y).unwrap().data(), &[0.0, 3.0, 4.0]);
    }
}
