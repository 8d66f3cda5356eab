//! Dense numeric primitives: row-major matrices, softmax, entropy and the
//! central-difference gradient oracle that every analytic gradient in the
//! crate is checked against.

use crate::error::{Error, Result};

/// Lower bound applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default step for [`finite_diff_gradient`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

const ROW_SUM_TOL: f64 = 1e-9;

#[inline]
pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0)
}

/// Row-major matrix of `f64` with all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix of shape {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry at row {}, col {}",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Builds a matrix without the finiteness scan. Callers guarantee the
    /// length; finiteness is checked where it matters (loss, parameters).
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        Self { rows, cols, values }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact(0) panics; a zero-column matrix has no row content.
        self.values.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self::from_vec_unchecked(indices.len(), self.cols, values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::invalid(format!(
                "matmul shape mismatch: {:?} x {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        gemm(
            (self.rows, self.cols, rhs.cols),
            (&self.values, self.cols as isize, 1),
            (&rhs.values, rhs.cols as isize, 1),
            &mut out.values,
        );
        Ok(out)
    }

    /// `selfᵀ · rhs`.
    pub fn t_matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != rhs.rows {
            return Err(Error::invalid(format!(
                "t_matmul shape mismatch: {:?}ᵀ x {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let mut out = DenseMatrix::zeros(self.cols, rhs.cols);
        gemm(
            (self.cols, self.rows, rhs.cols),
            (&self.values, 1, self.cols as isize),
            (&rhs.values, rhs.cols as isize, 1),
            &mut out.values,
        );
        Ok(out)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.cols {
            return Err(Error::invalid(format!(
                "matmul_t shape mismatch: {:?} x {:?}ᵀ",
                self.shape(),
                rhs.shape()
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, rhs.rows);
        gemm(
            (self.rows, self.cols, rhs.rows),
            (&self.values, self.cols as isize, 1),
            (&rhs.values, 1, rhs.cols as isize),
            &mut out.values,
        );
        Ok(out)
    }
}

/// `out = a · b` for an `m×k` by `k×n` product with arbitrary strides.
fn gemm(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], isize, isize),
    (b, rsb, csb): (&[f64], isize, isize),
    out: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(out.len() >= m * n);
    if k == 0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: the callers size `a` as m×k, `b` as k×n and `out` as m×n with the
    // strides passed in, so every index dgemm touches is in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A batch of probability rows (one per sample), each summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch(DenseMatrix);

impl ProbBatch {
    pub fn new(matrix: DenseMatrix) -> Result<Self> {
        for (i, row) in matrix.iter_rows().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::invalid(format!("row {i} has an entry outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self(matrix))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(DenseMatrix::from_rows(rows)?)
    }

    #[cfg(test)]
    pub(crate) fn from_matrix_unchecked(matrix: DenseMatrix) -> Self {
        Self(matrix)
    }

    #[inline]
    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.0
    }

    #[inline]
    pub fn num_samples(&self) -> usize {
        self.0.rows()
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.0.cols()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    /// Index of the largest probability in each row (first on ties).
    pub fn argmax(&self) -> Vec<usize> {
        self.0
            .iter_rows()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &p)| {
                        if p > best.1 {
                            (k, p)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }
}

/// Integer class labels over `num_classes` classes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVector {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::invalid(format!(
                "label {y} at index {i} is outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            labels,
            num_classes,
        })
    }

    #[inline]
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.labels
    }
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax(logits: &DenseMatrix) -> Result<ProbBatch> {
    if !logits.is_finite() {
        return Err(Error::invalid("softmax input contains non-finite logits"));
    }
    if logits.cols() == 0 {
        return Err(Error::invalid("softmax over zero classes"));
    }
    let mut out = logits.clone();
    for row in out.as_mut_slice().chunks_exact_mut(logits.cols()) {
        softmax_in_place(row);
    }
    Ok(ProbBatch(out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn one_hot(labels: &LabelVector) -> ProbBatch {
    let k = labels.num_classes();
    let mut m = DenseMatrix::zeros(labels.len(), k);
    for (i, &y) in labels.labels().iter().enumerate() {
        m.row_mut(i)[y] = 1.0;
    }
    ProbBatch(m)
}

/// Shannon entropy (nats) of one probability row, with `0·ln(1/0) = 0`.
pub fn row_entropy(row: &[f64]) -> f64 {
    row.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * clamp_prob(p).ln())
        .sum()
}

/// Mean over samples of the per-row entropy, in nats. Lies in `[0, ln k]`.
pub fn mean_prediction_entropy(probs: &ProbBatch) -> Result<f64> {
    let n = probs.num_samples();
    if n == 0 {
        return Err(Error::invalid("entropy of an empty batch"));
    }
    let total: f64 = probs.matrix().iter_rows().map(row_entropy).sum();
    Ok(total / n as f64)
}

/// Entropy reduction between an earlier and a later measurement.
#[inline]
pub fn entropy_reduction(h_early: f64, h_late: f64) -> f64 {
    h_early - h_late
}

/// Maps `dL/dp` to `dL/dz` through the softmax Jacobian, row by row:
/// `dz_j = p_j (g_j − Σ_k g_k p_k)`.
pub fn softmax_backward(probs: &ProbBatch, grad_wrt_probs: &DenseMatrix) -> Result<DenseMatrix> {
    if probs.matrix().shape() != grad_wrt_probs.shape() {
        return Err(Error::invalid(format!(
            "softmax_backward shape mismatch: probs {:?}, grad {:?}",
            probs.matrix().shape(),
            grad_wrt_probs.shape()
        )));
    }
    let (n, k) = grad_wrt_probs.shape();
    let mut out = Vec::with_capacity(n * k);
    for (p, g) in probs.matrix().iter_rows().zip(grad_wrt_probs.iter_rows()) {
        let dot: f64 = p.iter().zip(g).map(|(p, g)| p * g).sum();
        out.extend(p.iter().zip(g).map(|(p, g)| p * (g - dot)));
    }
    Ok(DenseMatrix::from_vec_unchecked(n, k, out))
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::OracleFailure(format!(
                "objective not finite around coordinate {i} ({plus}, {minus})"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Relative error between two gradients, `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, floor)`.
///
/// The floor keeps the measure meaningful when both gradients vanish.
pub fn gradient_relative_error(a: &[f64], b: &[f64]) -> f64 {
    const FLOOR: f64 = 1e-6;
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a
        .iter()
        .chain(b)
        .map(|v| v.abs())
        .fold(FLOOR, f64::max);
    diff / scale
}
