// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense linear algebra and statistics kernel.
//!
//! Everything downstream of this module inherits its floating-point
//! semantics: all math is `f64`, reductions accumulate left-to-right in a
//! fixed order (no reassociation), and masked attention logits use a true
//! `-inf` sentinel so masked probabilities come out exactly zero.

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "matrix {rows}x{cols} requires {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::DimensionMismatch("ragged row lengths".into()));
        }
        Ok(Self {
            rows: r,
            cols: c,
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
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

    /// Append one row; the matrix must have matching width (a fresh 0xC
    /// matrix adopts the row's width).
    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.data.is_empty() {
            self.cols = row.len();
        } else if row.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "push_row: expected width {}, got {}",
                self.cols,
                row.len()
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Copy of the matrix keeping only `keep` rows, in the given order.
    pub fn select_rows(&self, keep: &[usize]) -> Result<Self> {
        let mut out = Matrix::zeros(keep.len(), self.cols);
        for (r, &i) in keep.iter().enumerate() {
            if i >= self.rows {
                return Err(Error::InvalidArgument(format!(
                    "select_rows: row {i} out of range (rows={})",
                    self.rows
                )));
            }
            out.row_mut(r).copy_from_slice(self.row(i));
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product with deterministic accumulation: each output
/// entry sums its products over the inner dimension in ascending order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            let c_row = &mut c.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                c_row[j] += aik * b_row[j];
            }
        }
    }
    Ok(c)
}

/// `row · m[:, col_start..col_start+width]` as an owned vector.
///
/// Used for per-head projections without materializing weight blocks.
pub fn row_times_cols(row: &[f64], m: &Matrix, col_start: usize, width: usize) -> Vec<f64> {
    debug_assert_eq!(row.len(), m.rows);
    debug_assert!(col_start + width <= m.cols);
    let mut out = vec![0.0; width];
    for (k, &x) in row.iter().enumerate() {
        let m_row = &m.row(k)[col_start..col_start + width];
        for j in 0..width {
            out[j] += x * m_row[j];
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Numerically stable softmax of one logit row.
///
/// Entries may be `-inf` (masked); those map to exactly 0. A row that is
/// entirely `-inf` is rejected, since the caller must never mask a full row.
pub fn softmax_row(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty row".into()));
    }
    let mut max = f64::NEG_INFINITY;
    for &x in logits {
        if x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateRow);
    }
    let mut out = Vec::with_capacity(logits.len());
    let mut sum = 0.0;
    for &x in logits {
        // exp(-inf) is exactly 0.0, so masked slots contribute nothing.
        let e = (x - max).exp();
        out.push(e);
        sum += e;
    }
    for e in &mut out {
        *e /= sum;
    }
    Ok(out)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Root mean square of the entries, `sqrt(mean(v[i]^2))`.
pub fn rms(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("rms of empty vector".into()));
    }
    Ok((dot(v, v) / v.len() as f64).sqrt())
}

/// Cosine of the angle between two nonzero vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroDirection);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Median of absolute values; an even count averages the two middle elements.
pub fn median_abs(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("median of empty sequence".into()));
    }
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    abs.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN"));
    let n = abs.len();
    if n % 2 == 1 {
        Ok(abs[n / 2])
    } else {
        Ok((abs[n / 2 - 1] + abs[n / 2]) / 2.0)
    }
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "pearson: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument(
            "pearson requires at least two samples".into(),
        ));
    }
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for i in 0..x.len() {
        let dx = x[i] - mean_x;
        let dy = y[i] - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 {
        return Err(Error::UndefinedCorrelation("x is constant".into()));
    }
    if var_y == 0.0 {
        return Err(Error::UndefinedCorrelation("y is constant".into()));
    }
    Ok((cov / (var_x * var_y).sqrt()).clamp(-1.0, 1.0))
}

/// Orthogonal projection of `v` onto the line spanned by `dir`.
pub fn project_onto(v: &[f64], dir: &[f64]) -> Result<Vec<f64>> {
    if v.len() != dir.len() {
        return Err(Error::DimensionMismatch(format!(
            "project_onto: {} vs {}",
            v.len(),
            dir.len()
        )));
    }
    let denom = dot(dir, dir);
    if denom == 0.0 {
        return Err(Error::ZeroDirection);
    }
    let coef = dot(v, dir) / denom;
    Ok(dir.iter().map(|d| coef * d).collect())
}
