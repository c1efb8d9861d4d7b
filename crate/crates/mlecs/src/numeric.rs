//! Minimal dense linear algebra and scalar utilities.
//!
//! Everything downstream (representation volumes, model forwards, pooled
//! knowledge-transfer losses) is built on this module: row-major `f64`
//! matrices, an LU determinant, a regularized inverse, numerically stable
//! `log_softmax`/`kl_divergence`, and a central-finite-difference gradient
//! checker. No broadcasting, no sparsity, no complex numbers; the point of
//! this crate is verifiable arithmetic, not throughput.

use crate::{Error, Result};

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build from row-major data; rejects length mismatches and non-finite
    /// entries so that every held matrix is valid by construction.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::BadVectorLength {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "matrix data",
                index,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty { what: "matrix rows" });
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::LengthMismatch {
                left: cols,
                right: rows.iter().map(Vec::len).find(|&l| l != cols).unwrap_or(cols),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Stack the given vectors as columns.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Empty {
                what: "matrix columns",
            });
        }
        let rows = columns[0].len();
        if let Some(c) = columns.iter().find(|c| c.len() != rows) {
            return Err(Error::LengthMismatch {
                left: rows,
                right: c.len(),
            });
        }
        let mut data = vec![0.0; rows * columns.len()];
        for (j, col) in columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                data[i * columns.len() + j] = *v;
            }
        }
        Self::new(rows, columns.len(), data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    /// Matrix-vector product.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::BadVectorLength {
                expected: self.cols,
                got: x.len(),
            });
        }
        let mut y = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            y[i] = acc;
        }
        Ok(y)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Exact mathematical product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// Gram matrix `AᵀA` of the columns of `a`. Symmetric and positive
/// semidefinite for any real `a`.
pub fn gram(a: &Matrix) -> Result<Matrix> {
    if a.data.is_empty() {
        return Err(Error::Empty { what: "gram input" });
    }
    matmul(&a.transpose(), a)
}

/// Determinant via LU factorization with partial pivoting. Returns the
/// signed value; callers that feed Gram matrices clamp at zero before
/// taking square roots.
pub fn det(g: &Matrix) -> Result<f64> {
    if g.rows != g.cols {
        return Err(Error::NonSquare {
            rows: g.rows,
            cols: g.cols,
        });
    }
    let n = g.rows;
    if n == 0 {
        return Err(Error::Empty { what: "det input" });
    }
    let mut lu = g.data.clone();
    let mut sign = 1.0;
    for k in 0..n {
        // partial pivot: largest magnitude in column k at or below the diagonal
        let mut pivot_row = k;
        let mut pivot_abs = lu[k * n + k].abs();
        for r in (k + 1)..n {
            let cand = lu[r * n + k].abs();
            if cand > pivot_abs {
                pivot_abs = cand;
                pivot_row = r;
            }
        }
        if pivot_abs == 0.0 {
            return Ok(0.0);
        }
        if pivot_row != k {
            for c in 0..n {
                lu.swap(k * n + c, pivot_row * n + c);
            }
            sign = -sign;
        }
        let pivot = lu[k * n + k];
        for r in (k + 1)..n {
            let factor = lu[r * n + k] / pivot;
            lu[r * n + k] = factor;
            for c in (k + 1)..n {
                lu[r * n + c] -= factor * lu[k * n + c];
            }
        }
    }
    let mut d = sign;
    for k in 0..n {
        d *= lu[k * n + k];
    }
    Ok(d)
}

const SINGULAR_PIVOT: f64 = 1e-300;

/// `(g + eps·I)⁻¹` through the same LU machinery. `g` must be square and
/// symmetric within `1e-9`; rejects matrices that stay singular after the
/// regularization shift.
pub fn inverse_regularized(g: &Matrix, eps: f64) -> Result<Matrix> {
    if g.rows != g.cols {
        return Err(Error::NonSquare {
            rows: g.rows,
            cols: g.cols,
        });
    }
    if eps < 0.0 {
        return Err(Error::InvalidArgument {
            detail: format!("regularization eps must be >= 0, got {eps}"),
        });
    }
    let n = g.rows;
    for i in 0..n {
        for j in (i + 1)..n {
            if (g.get(i, j) - g.get(j, i)).abs() > 1e-9 {
                return Err(Error::NotSymmetric { tol: 1e-9 });
            }
        }
    }
    let mut lu = g.data.clone();
    for i in 0..n {
        lu[i * n + i] += eps;
    }
    // in-place factorization with a row permutation
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut pivot_row = k;
        let mut pivot_abs = lu[k * n + k].abs();
        for r in (k + 1)..n {
            let cand = lu[r * n + k].abs();
            if cand > pivot_abs {
                pivot_abs = cand;
                pivot_row = r;
            }
        }
        if pivot_abs < SINGULAR_PIVOT {
            return Err(Error::Singular { pivot: pivot_abs });
        }
        if pivot_row != k {
            for c in 0..n {
                lu.swap(k * n + c, pivot_row * n + c);
            }
            perm.swap(k, pivot_row);
        }
        let pivot = lu[k * n + k];
        for r in (k + 1)..n {
            let factor = lu[r * n + k] / pivot;
            lu[r * n + k] = factor;
            for c in (k + 1)..n {
                lu[r * n + c] -= factor * lu[k * n + c];
            }
        }
    }
    // solve (G+eps I) x = e_j for each basis vector
    let mut inv = Matrix::zeros(n, n);
    let mut x = vec![0.0; n];
    for j in 0..n {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = if perm[i] == j { 1.0 } else { 0.0 };
        }
        for i in 1..n {
            let mut acc = x[i];
            for k in 0..i {
                acc -= lu[i * n + k] * x[k];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for k in (i + 1)..n {
                acc -= lu[i * n + k] * x[k];
            }
            x[i] = acc / lu[i * n + i];
        }
        for i in 0..n {
            inv.set(i, j, x[i]);
        }
    }
    Ok(inv)
}

/// Max-shifted log-softmax; `exp` of the output sums to one.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty { what: "log_softmax input" });
    }
    if let Some(index) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "log_softmax input",
            index,
        });
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    Ok(logits.iter().map(|&v| v - lse).collect())
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    Ok(log_softmax(logits)?.iter().map(|&v| v.exp()).collect())
}

/// Floor applied to `q` entries before division, guarding against the
/// divergence singularities of near-zero probabilities.
pub const KL_FLOOR: f64 = 1e-12;

/// `Σ p_i ln(p_i/q_i)` with `0·ln 0 = 0`. Both arguments must already be
/// probability vectors (sum to one within `1e-9`).
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    if p.is_empty() {
        return Err(Error::Empty { what: "kl input" });
    }
    for (name, v) in [("p", p), ("q", q)] {
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument {
                detail: format!("{name} must sum to 1 within 1e-9, got {sum}"),
            });
        }
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            acc += pi * (pi / qi.max(KL_FLOOR)).ln();
        }
    }
    Ok(acc)
}

/// Outcome of a central-finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Compare `analytic` against central differences of `f` at `x`:
/// `numeric[i] = (f(x+h·e_i) - f(x-h·e_i)) / 2h`. The relative error of an
/// entry is `|a-n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument {
            detail: format!("step h must be > 0, got {h}"),
        });
    }
    if x.len() != analytic.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: analytic.len(),
        });
    }
    let mut probe = x.to_vec();
    let mut numeric = vec![0.0; x.len()];
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteObjective { index: i });
        }
        numeric[i] = (up - down) / (2.0 * h);
    }
    let mut max_rel_err = 0.0_f64;
    let mut max_abs_err = 0.0_f64;
    for (&a, &n) in analytic.iter().zip(&numeric) {
        let abs = (a - n).abs();
        max_abs_err = max_abs_err.max(abs);
        max_rel_err = max_rel_err.max(abs / a.abs().max(n.abs()).max(1e-8));
    }
    Ok(GradReport {
        analytic: analytic.to_vec(),
        numeric,
        max_rel_err,
        max_abs_err,
    })
}
