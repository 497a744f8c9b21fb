use super::{Real, Tensor};
use crate::{Error, Result};

/// Compressed sparse row matrix with `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    vals: Vec<f32>,
}

impl SparseMatrix {
    /// Build from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f32)]) -> Result<Self> {
        let mut sorted = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= rows || c >= cols {
                return Err(Error::shape(format!(
                    "triplet ({r}, {c}) outside {rows}x{cols} matrix"
                )));
            }
        }
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut vals: Vec<f32> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *vals.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            col_idx.push(c as u32);
            vals.push(v);
            row_ptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(SparseMatrix { rows, cols, row_ptr, col_idx, vals })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Entries of row `r` as (column, value).
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f32)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().zip(&self.vals[span]).map(|(&c, &v)| (c as usize, v))
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f32)> {
        (0..self.rows).flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v))).collect()
    }

    pub fn to_dense(&self) -> Tensor<f32> {
        let mut d = Tensor::zeros([self.rows, self.cols]);
        for (r, c, v) in self.triplets() {
            d.data_mut()[r * self.cols + c] += v;
        }
        d
    }

    /// True when every entry is nonnegative and every row sums to one within `tol`.
    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        (0..self.rows).all(|r| {
            let mut sum = 0.0f64;
            for (_, v) in self.row(r) {
                if v < 0.0 {
                    return false;
                }
                sum += v as f64;
            }
            (sum - 1.0).abs() <= tol
        })
    }

    /// `self · x` for dense `x` of shape [cols, C].
    pub fn matmul<R: Real>(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        if x.rank() != 2 || x.dim(0) != self.cols {
            return Err(Error::shape(format!(
                "sparse {}x{} times dense {:?}",
                self.rows,
                self.cols,
                x.shape()
            )));
        }
        let c = x.dim(1);
        let mut out = Tensor::zeros([self.rows, c]);
        let src = x.data();
        for (r, dst) in out.data_mut().chunks_exact_mut(c).enumerate() {
            for (col, v) in self.row(r) {
                let v = R::of(v as f64);
                for (o, &s) in dst.iter_mut().zip(&src[col * c..(col + 1) * c]) {
                    *o += v * s;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · g` for dense `g` of shape [rows, C], accumulated into `out` [cols, C].
    pub(crate) fn transpose_matmul_acc<R: Real>(&self, g: &[R], c: usize, out: &mut [R]) {
        for r in 0..self.rows {
            let src = &g[r * c..(r + 1) * c];
            for (col, v) in self.row(r) {
                let v = R::of(v as f64);
                for (o, &s) in out[col * c..(col + 1) * c].iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
    }

    /// Product `self · other`.
    pub fn compose(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "cannot compose {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut trip = Vec::new();
        for r in 0..self.rows {
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    trip.push((r, c, a * b));
                }
            }
        }
        SparseMatrix::from_triplets(self.rows, other.cols, &trip)
    }
}
