//! Dense linear-algebra kernels and the seeded random stream.
//!
//! Everything here works on [`DenseMatrix`], a row-major `f64` array. Products
//! accumulate every output cell left to right over the inner index, so results
//! are bitwise reproducible regardless of how callers schedule work.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Entries drawn i.i.d. from `N(0, scale^2)`.
    pub fn random_normal(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| scale * rng.normal())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Contiguous block of rows `[start, end)`.
    pub fn row_slice(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns `[start, end)`.
    pub fn col_slice(&self, start: usize, end: usize) -> Self {
        Self::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Self {
        Self::from_fn(self.rows, idx.len(), |i, j| self.get(i, idx[j]))
    }

    pub fn set_row_slice(&mut self, start: usize, block: &DenseMatrix) {
        debug_assert_eq!(block.cols, self.cols);
        let n = block.data.len();
        self.data[start * self.cols..start * self.cols + n].copy_from_slice(&block.data);
    }

    pub fn set_col_slice(&mut self, start: usize, block: &DenseMatrix) {
        debug_assert_eq!(block.rows, self.rows);
        for i in 0..block.rows {
            for j in 0..block.cols {
                self.set(i, start + j, block.get(i, j));
            }
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &DenseMatrix) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &DenseMatrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign_scaled(&mut self, other: &DenseMatrix, s: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    /// Squared Frobenius distance, without allocating the difference.
    pub fn dist_sq(&self, other: &DenseMatrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        matmul(self, other)
    }
}

/// Standard product `a * b`.
///
/// Each output cell is accumulated from `0.0` over the inner index in
/// increasing order; the i-k-j loop only changes memory traffic, not that
/// order.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::dim("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, n) = (a.rows, b.cols);
    let mut out = DenseMatrix::zeros(m, n);
    for i in 0..m {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `aᵀ * b` without materializing the transpose.
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(Error::dim("matmul_tn", format!("{:?}ᵀ x {:?}", a.shape(), b.shape())));
    }
    let (m, n) = (a.cols, b.cols);
    let mut out = DenseMatrix::zeros(m, n);
    for k in 0..a.rows {
        let a_row = a.row(k);
        let b_row = b.row(k);
        for (i, &aki) in a_row.iter().enumerate() {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// `a * bᵀ`: every cell is a row-by-row dot product.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(Error::dim("matmul_nt", format!("{:?} x {:?}ᵀ", a.shape(), b.shape())));
    }
    Ok(DenseMatrix::from_fn(a.rows, b.rows, |i, j| dot(a.row(i), b.row(j))))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Elementwise `max(0, z)`.
pub fn relu(z: &DenseMatrix) -> DenseMatrix {
    z.map(|v| v.max(0.0))
}

/// `softmax(x / temperature)`, shifted by the maximum for stability.
pub fn softmax_vec(x: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::param(
            "temperature",
            format!("must be positive and finite, got {temperature}"),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("x", "softmax input must be finite"));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Row-wise softmax of a matrix at unit temperature.
pub fn softmax_rows(z: &DenseMatrix) -> DenseMatrix {
    let mut out = z.clone();
    for i in 0..z.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Solves the symmetric positive-definite system `m * x = rhs`.
///
/// Cholesky factorization followed by one step of iterative refinement. A
/// pivot below `1e-13` times the largest diagonal entry is reported as
/// singular.
pub fn solve_spd(m: &DenseMatrix, rhs: &DenseMatrix) -> Result<DenseMatrix> {
    let n = m.rows();
    if m.cols() != n || rhs.rows() != n {
        return Err(Error::dim(
            "solve_spd",
            format!("system {:?} with rhs {:?}", m.shape(), rhs.shape()),
        ));
    }
    let l = cholesky(m)?;
    let mut x = cholesky_solve(&l, rhs);
    // one refinement pass: x += M⁻¹ (rhs - M x)
    let residual = rhs.sub(&matmul(m, &x)?)?;
    let correction = cholesky_solve(&l, &residual);
    x.add_assign_scaled(&correction, 1.0);
    Ok(x)
}

fn cholesky(m: &DenseMatrix) -> Result<DenseMatrix> {
    let n = m.rows();
    let max_diag = (0..n).map(|i| m.get(i, i).abs()).fold(0.0, f64::max);
    let tol = 1e-13 * max_diag.max(f64::MIN_POSITIVE);
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = m.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > tol) {
            return Err(Error::Singular {
                op: "cholesky",
                detail: format!("pivot {d:.3e} at column {j} (tolerance {tol:.3e})"),
            });
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &DenseMatrix, rhs: &DenseMatrix) -> DenseMatrix {
    let n = l.rows();
    let mut x = rhs.clone();
    for c in 0..rhs.cols() {
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in i + 1..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    x
}

/// Solves `min_X ‖A X − B‖² + eps‖X‖²` through the normal equations
/// `(AᵀA + eps I) X = AᵀB`.
pub fn ridge_solve(a: &DenseMatrix, b: &DenseMatrix, eps: f64) -> Result<DenseMatrix> {
    if a.rows() != b.rows() {
        return Err(Error::dim(
            "ridge_solve",
            format!("A {:?} vs B {:?}", a.shape(), b.shape()),
        ));
    }
    if !(eps >= 0.0) {
        return Err(Error::param("eps", format!("must be >= 0, got {eps}")));
    }
    let mut gram = matmul_tn(a, a)?;
    for i in 0..gram.rows() {
        let v = gram.get(i, i) + eps;
        gram.set(i, i, v);
    }
    let rhs = matmul_tn(a, b)?;
    solve_spd(&gram, &rhs).map_err(|e| match e {
        Error::Singular { detail, .. } => Error::Singular {
            op: "ridge_solve",
            detail,
        },
        other => other,
    })
}

/// Weight fit `min_W ‖W X − Y‖² + eps‖W‖²` for feature-major data
/// (`X` is `p × T`, `Y` is `q × T`); returns `W` of shape `q × p`.
pub fn ridge_fit(y: &DenseMatrix, x: &DenseMatrix, eps: f64) -> Result<DenseMatrix> {
    if x.cols() != y.cols() {
        return Err(Error::dim(
            "ridge_fit",
            format!("inputs {:?} vs targets {:?}", x.shape(), y.shape()),
        ));
    }
    if !(eps >= 0.0) {
        return Err(Error::param("eps", format!("must be >= 0, got {eps}")));
    }
    let mut gram = matmul_nt(x, x)?;
    for i in 0..gram.rows() {
        let v = gram.get(i, i) + eps;
        gram.set(i, i, v);
    }
    let rhs = matmul_nt(x, y)?;
    let wt = solve_spd(&gram, &rhs).map_err(|e| match e {
        Error::Singular { detail, .. } => Error::Singular {
            op: "ridge_fit",
            detail,
        },
        other => other,
    })?;
    Ok(wt.transpose())
}

/// Seeded pseudo-random stream (ChaCha8). Identical seeds give identical
/// streams on every platform. Not shared between workers: use [`Rng::fork`].
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this seed and a stream label.
    pub fn fork(&self, stream: u64) -> Rng {
        let mixed =
            self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
        let mut inner = ChaCha8Rng::seed_from_u64(mixed);
        inner.set_stream(stream);
        Rng { seed: mixed, inner }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.uniform() * n as f64) as usize % n
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = DenseMatrix::from_rows(&[&[1.5, -2.0], &[0.25, 7.0]]);
        assert_eq!(matmul(&DenseMatrix::identity(2), &m).unwrap(), m);
        let a = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = DenseMatrix::from_rows(&[&[0.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), DenseMatrix::from_rows(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = DenseMatrix::random_normal(5, 7, 1.0, &mut rng);
        let b = DenseMatrix::random_normal(7, 3, 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&naive(&a, &b)) <= 1e-12);
        // transposed variants agree with the plain product
        let tn = matmul_tn(&a.transpose(), &b).unwrap();
        let nt = matmul_nt(&a, &b.transpose()).unwrap();
        assert!(tn.max_abs_diff(&got) <= 1e-12);
        assert!(nt.max_abs_diff(&got) <= 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = DenseMatrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn ridge_identity_and_mean() {
        let b = DenseMatrix::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5], &[4.0, 4.0]]);
        let x = ridge_solve(&DenseMatrix::identity(3), &b, 0.0).unwrap();
        assert!(x.max_abs_diff(&b) < 1e-12);
        let a = DenseMatrix::from_rows(&[&[1.0], &[1.0]]);
        let b = DenseMatrix::from_rows(&[&[0.0], &[2.0]]);
        let x = ridge_solve(&a, &b, 0.0).unwrap();
        assert!((x.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ridge_singular_without_jitter() {
        let a = DenseMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]);
        let b = DenseMatrix::from_rows(&[&[1.0], &[1.0], &[1.0]]);
        let err = ridge_solve(&a, &b, 0.0).unwrap_err();
        assert!(matches!(err, Error::Singular { .. }));
        assert!(err.to_string().contains("eps > 0"));
        assert!(ridge_solve(&a, &b, 1e-6).is_ok());
    }

    #[test]
    fn relu_cases() {
        let z = DenseMatrix::from_rows(&[&[-1.0, 2.0]]);
        assert_eq!(relu(&z), DenseMatrix::from_rows(&[&[0.0, 2.0]]));
        assert_eq!(relu(&DenseMatrix::zeros(3, 2)), DenseMatrix::zeros(3, 2));
        let mut rng = Rng::new(3);
        let m = DenseMatrix::random_normal(4, 6, 1.0, &mut rng);
        let r = relu(&m);
        for (o, i) in r.data().iter().zip(m.data()) {
            assert_eq!(*o, if *i > 0.0 { *i } else { 0.0 });
        }
    }

    #[test]
    fn softmax_cases() {
        let p = softmax_vec(&[2.5; 4], 0.3).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let p = softmax_vec(&[0.0, 3f64.ln()], 1.0).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let p = softmax_vec(&[0.0, 1.0, -2.0], 1e9).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-6));
        assert!(softmax_vec(&[1.0], 0.0).is_err());
        assert!(softmax_vec(&[1.0], -1.0).is_err());
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let xs: Vec<f64> = (0..16).map(|_| a.normal()).collect();
        let ys: Vec<f64> = (0..16).map(|_| b.normal()).collect();
        assert_eq!(xs, ys);
        let mut f1 = Rng::new(42).fork(1);
        let mut f2 = Rng::new(42).fork(2);
        assert_ne!(f1.next_u64(), f2.next_u64());
    }
}
