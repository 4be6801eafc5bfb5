//! Dense row-major 2-D `f32` tensors and the small amount of linear algebra
//! the adapter operators need (Householder QR, one-sided Jacobi SVD).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {rows}x{cols}")]
    Length { rows: usize, cols: usize, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("negative singular value {0}")]
    NegativeSingular(f32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Length {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from nested rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.set(i, i, 1.0);
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    fn check_same(&self, other: &Self, what: &str) -> Result<(), TensorError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(TensorError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self, TensorError> {
        self.check_same(other, "elementwise")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    pub fn frobenius(&self) -> f32 {
        self.data.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f32, TensorError> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Scales column `j` by `s`.
    pub fn scale_col(&mut self, j: usize, s: f32) {
        for i in 0..self.rows {
            let v = self.get(i, j);
            self.set(i, j, v * s);
        }
    }

    /// Returns a new tensor holding the given columns, in order.
    pub fn select_cols(&self, cols: &[usize]) -> Self {
        Self::from_fn(self.rows, cols.len(), |i, j| self.get(i, cols[j]))
    }

    /// Maximum absolute deviation of `selfᵀ self` from the identity.
    pub fn orthonormality_error(&self) -> f32 {
        let gram = self.transpose().matmul(self).expect("square gram");
        let mut worst = 0.0f32;
        for i in 0..gram.rows {
            for j in 0..gram.cols {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram.get(i, j) - target).abs());
            }
        }
        worst
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Population standard deviation over all entries.
pub fn tensor_std(t: &Tensor2D) -> f32 {
    let n = t.len();
    if n == 0 {
        return 0.0;
    }
    let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = t
        .data()
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    var.sqrt() as f32
}

/// Thin Householder QR of an `m x n` matrix with `m >= n`.
///
/// Returns `(Q, R)` with `Q` of shape `m x n` (orthonormal columns) and `R`
/// upper-triangular `n x n`. Zero columns are skipped, which keeps `Q`
/// orthonormal for rank-deficient inputs.
pub fn householder_qr(m: &Tensor2D) -> Result<(Tensor2D, Tensor2D), TensorError> {
    let (rows, cols) = m.shape();
    if rows < cols {
        return Err(TensorError::Shape(format!(
            "thin QR needs rows >= cols, got {rows}x{cols}"
        )));
    }
    if !m.is_finite() {
        return Err(TensorError::NonFinite("qr input"));
    }
    let mut work = m.clone();
    let mut reflectors: Vec<Option<Vec<f32>>> = Vec::with_capacity(cols);
    for k in 0..cols {
        let norm = (k..rows)
            .map(|i| work.get(i, k) * work.get(i, k))
            .sum::<f32>()
            .sqrt();
        if norm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let x0 = work.get(k, k);
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v: Vec<f32> = (k..rows).map(|i| work.get(i, k)).collect();
        v[0] -= alpha;
        let vnorm2: f32 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            reflectors.push(None);
            continue;
        }
        for j in k..cols {
            let dot: f32 = (k..rows).map(|i| v[i - k] * work.get(i, j)).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..rows {
                let val = work.get(i, j) - f * v[i - k];
                work.set(i, j, val);
            }
        }
        let inv = 1.0 / vnorm2.sqrt();
        reflectors.push(Some(v.into_iter().map(|x| x * inv).collect()));
    }
    let r = Tensor2D::from_fn(cols, cols, |i, j| if j >= i { work.get(i, j) } else { 0.0 });
    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of the identity.
    let mut q = Tensor2D::from_fn(rows, cols, |i, j| if i == j { 1.0 } else { 0.0 });
    for k in (0..cols).rev() {
        if let Some(v) = &reflectors[k] {
            for j in 0..cols {
                let dot: f32 = (k..rows).map(|i| v[i - k] * q.get(i, j)).sum();
                for i in k..rows {
                    let val = q.get(i, j) - 2.0 * dot * v[i - k];
                    q.set(i, j, val);
                }
            }
        }
    }
    Ok((q, r))
}

/// SVD of a small square matrix via one-sided Jacobi rotations.
///
/// Returns `(U, S, V)` with singular values sorted in non-increasing order and
/// `U`, `V` orthonormal (columns for zero singular values are completed to an
/// orthonormal basis).
pub fn jacobi_svd(m: &Tensor2D) -> Result<(Tensor2D, Vec<f32>, Tensor2D), TensorError> {
    let (n, c) = m.shape();
    if n != c {
        return Err(TensorError::Shape(format!("jacobi_svd needs square, got {n}x{c}")));
    }
    if !m.is_finite() {
        return Err(TensorError::NonFinite("svd input"));
    }
    let mut a = m.clone();
    let mut v = Tensor2D::identity(n);
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut alpha = 0.0f32;
                let mut beta = 0.0f32;
                let mut gamma = 0.0f32;
                for i in 0..n {
                    let ap = a.get(i, p);
                    let aq = a.get(i, q);
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                if gamma == 0.0 || gamma.abs() <= 1e-7 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..n {
                    let ap = a.get(i, p);
                    let aq = a.get(i, q);
                    a.set(i, p, cs * ap - sn * aq);
                    a.set(i, q, sn * ap + cs * aq);
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, cs * vp - sn * vq);
                    v.set(i, q, sn * vp + cs * vq);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f32> = (0..n)
        .map(|j| (0..n).map(|i| a.get(i, j) * a.get(i, j)).sum::<f32>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]).then(i.cmp(&j)));
    let a = a.select_cols(&order);
    let v = v.select_cols(&order);
    sv = order.iter().map(|&i| sv[i]).collect();
    let smax = sv.first().copied().unwrap_or(0.0);
    let tiny = f32::EPSILON * smax.max(f32::MIN_POSITIVE) * n as f32;
    let mut u = Tensor2D::zeros(n, n);
    let mut filled = Vec::with_capacity(n);
    for j in 0..n {
        if sv[j] > tiny {
            for i in 0..n {
                u.set(i, j, a.get(i, j) / sv[j]);
            }
            filled.push(j);
        } else {
            sv[j] = if sv[j] > 0.0 { sv[j] } else { 0.0 };
        }
    }
    complete_basis(&mut u, &filled);
    Ok((u, sv, v))
}

/// Fills the columns of `u` not listed in `filled` with unit vectors orthogonal
/// to every other column (modified Gram-Schmidt over the standard basis).
fn complete_basis(u: &mut Tensor2D, filled: &[usize]) {
    let n = u.rows();
    let mut done: Vec<usize> = filled.to_vec();
    let mut candidate = 0usize;
    for j in 0..u.cols() {
        if filled.contains(&j) {
            continue;
        }
        while candidate < n {
            let mut w: Vec<f32> = (0..n).map(|i| if i == candidate { 1.0 } else { 0.0 }).collect();
            candidate += 1;
            for _ in 0..2 {
                for &k in &done {
                    let dot: f32 = (0..n).map(|i| w[i] * u.get(i, k)).sum();
                    for (i, wi) in w.iter_mut().enumerate() {
                        *wi -= dot * u.get(i, k);
                    }
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm > 1e-3 {
                for (i, wi) in w.iter().enumerate() {
                    u.set(i, j, wi / norm);
                }
                done.push(j);
                break;
            }
        }
    }
}
