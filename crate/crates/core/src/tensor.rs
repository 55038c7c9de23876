//! Dense row-major f64 matrices with fixed evaluation order.
//!
//! Every reduction here runs left to right over the inner index, so results
//! are reproducible bit for bit across runs and machines. That property is
//! load bearing: the sequence-parallel simulator asserts bit-identical logits
//! against the single-process path, and importance ranking compares cached
//! softmax denominators for exact float equality with a recomputation.

use crate::error::Error;
use crate::Result;
use serde::{Deserialize, Serialize};

/// Guard subtracted before `ceil` when a count is derived from a ratio.
/// Plain f64 evaluation of e.g. (1 - 0.1) * 10 yields 9.000000000000002,
/// which would otherwise ceil to 10 and break exact-integer landings.
const CEIL_GUARD: f64 = 1e-9;

/// Number of columns kept when dropping a `p` fraction of `cols`.
/// Keeps `ceil((1 - p) * cols)`, never less than one column.
pub fn kept_width(cols: usize, p: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::BadDropRatio { value: p });
    }
    if cols == 0 {
        return Err(Error::EmptyMatrix { context: "kept_width of zero columns".into() });
    }
    let raw = ((1.0 - p) * cols as f64 - CEIL_GUARD).ceil();
    Ok((raw.max(1.0) as usize).min(cols))
}

/// `ceil(fraction * n)` with the same guard, used for important-token counts.
pub fn ceil_count(fraction: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let raw = (fraction * n as f64 - CEIL_GUARD).ceil();
    (raw.max(1.0) as usize).min(n)
}

/// Dense row-major matrix of finite f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::BadLength { rows, cols, len: data.len() });
        }
        for (idx, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { row: idx / cols.max(1), col: idx % cols.max(1) });
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::ShapeMismatch {
                    expected: format!("rows of length {c}"),
                    got: format!("row of length {}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                debug_assert!(v.is_finite());
                m.data[i * cols + j] = v;
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(v.is_finite());
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Matrix product with deterministic accumulation: each output element
    /// sums a[i][k] * b[k][j] over k ascending from zero.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimMismatch {
                lr: self.rows,
                lc: self.cols,
                rr: other.rows,
                rc: other.cols,
            });
        }
        let (m, k_dim, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        // i-k-j loop order: cache friendly, and each out[i][j] still receives
        // its terms in ascending k order, matching a plain triple loop bit
        // for bit.
        for i in 0..m {
            let a_row = &self.data[i * k_dim..(i + 1) * k_dim];
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a_ik) in a_row.iter().enumerate() {
                let b_row = &other.data[k * n..(k + 1) * n];
                for j in 0..n {
                    out_row[j] += a_ik * b_row[j];
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T` without materializing the transpose. Accumulation
    /// order over the inner index matches `matmul(self, other.transpose())`.
    pub fn matmul_transpose_b(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::DimMismatch {
                lr: self.rows,
                lc: self.cols,
                rr: other.cols,
                rc: other.rows,
            });
        }
        let (m, k_dim, n) = (self.rows, self.cols, other.rows);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k_dim..(i + 1) * k_dim];
            for j in 0..n {
                let b_row = &other.data[j * k_dim..(j + 1) * k_dim];
                let mut acc = 0.0;
                for k in 0..k_dim {
                    acc += a_row[k] * b_row[k];
                }
                out.data[i * n + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= s;
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimMismatch {
                lr: self.rows,
                lc: self.cols,
                rr: other.rows,
                rc: other.cols,
            });
        }
        let mut out = self.clone();
        for (o, b) in out.data.iter_mut().zip(&other.data) {
            *o = f(*o, *b);
        }
        Ok(out)
    }

    /// Leftmost `keep` columns as a new matrix.
    pub fn take_cols(&self, keep: usize) -> Matrix {
        assert!(keep <= self.cols);
        let mut out = Matrix::zeros(self.rows, keep);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[..keep]);
        }
        out
    }

    /// Topmost `keep` rows as a new matrix.
    pub fn take_rows(&self, keep: usize) -> Matrix {
        assert!(keep <= self.rows);
        Matrix {
            rows: keep,
            cols: self.cols,
            data: self.data[..keep * self.cols].to_vec(),
        }
    }

    /// Drops the rightmost `p` fraction of columns, keeping
    /// `ceil((1 - p) * cols)` and never fewer than one.
    pub fn truncate_columns(&self, p: f64) -> Result<Matrix> {
        let keep = kept_width(self.cols, p)?;
        Ok(self.take_cols(keep))
    }

    /// Stacks blocks left to right. All blocks must share a row count.
    pub fn concat_cols(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut at = 0;
        for b in blocks {
            if b.rows != rows {
                return Err(Error::ShapeMismatch {
                    expected: format!("{rows} rows"),
                    got: format!("{} rows", b.rows),
                });
            }
            for i in 0..rows {
                out.row_mut(i)[at..at + b.cols].copy_from_slice(b.row(i));
            }
            at += b.cols;
        }
        Ok(out)
    }

    /// Stacks blocks top to bottom. All blocks must share a column count.
    pub fn concat_rows(blocks: &[&Matrix]) -> Result<Matrix> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        let rows: usize = blocks.iter().map(|b| b.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for b in blocks {
            if b.cols != cols {
                return Err(Error::ShapeMismatch {
                    expected: format!("{cols} cols"),
                    got: format!("{} cols", b.cols),
                });
            }
            data.extend_from_slice(&b.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Zeroes row entries from `from` to the end, the refill inverse used on
    /// narrowed token rows.
    pub fn zero_row_tail(&mut self, row: usize, from: usize) {
        for v in &mut self.row_mut(row)[from..] {
            *v = 0.0;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = f(*v);
        }
        out
    }

    pub fn frob_norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `||a - b||_F / max(||b||_F, floor)`, the relative error measure used by
/// equivalence checks.
pub fn rel_frob_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols), "rel_frob_diff shape mismatch");
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        num += (x - y) * (x - y);
        den += y * y;
    }
    num.sqrt() / den.sqrt().max(1e-300)
}

/// Row-wise softmax with an optional causal mask, returning the
/// probabilities and each row's denominator `sum_k exp(a[i][k])` over
/// unmasked keys.
///
/// The causal mask is right aligned: row `i` may attend to columns
/// `j <= i + (cols - rows)`, which reduces to the usual lower triangle for
/// square inputs and leaves a single decode row fully unmasked.
///
/// Probabilities are computed max-shifted; the returned denominator is the
/// shifted sum multiplied back by `exp(max)`, so it equals the naive sum up
/// to roundoff. A fully masked row is an error.
pub fn softmax_rows(a: &Matrix, causal: bool) -> Result<(Matrix, Vec<f64>)> {
    let (rows, cols) = (a.rows(), a.cols());
    let mut probs = Matrix::zeros(rows, cols);
    let mut denoms = Vec::with_capacity(rows);
    for i in 0..rows {
        let hi = if causal {
            let lim = i as isize + cols as isize - rows as isize;
            if lim < 0 {
                return Err(Error::FullyMaskedRow { row: i });
            }
            (lim as usize + 1).min(cols)
        } else {
            cols
        };
        if hi == 0 {
            return Err(Error::FullyMaskedRow { row: i });
        }
        let row = a.row(i);
        let mut m = f64::NEG_INFINITY;
        for &v in &row[..hi] {
            m = m.max(v);
        }
        let mut sum = 0.0;
        let out = probs.row_mut(i);
        for j in 0..hi {
            let e = (row[j] - m).exp();
            out[j] = e;
            sum += e;
        }
        for v in &mut out[..hi] {
            *v /= sum;
        }
        denoms.push(sum * m.exp());
    }
    Ok((probs, denoms))
}

/// Number of unmasked keys in each softmax row, matching the mask rule of
/// [`softmax_rows`]. Used to normalize importance scores.
pub fn unmasked_counts(rows: usize, cols: usize, causal: bool) -> Vec<usize> {
    (0..rows)
        .map(|i| {
            if causal {
                let lim = i as isize + cols as isize - rows as isize;
                if lim < 0 {
                    0
                } else {
                    (lim as usize + 1).min(cols)
                }
            } else {
                cols
            }
        })
        .collect()
}
