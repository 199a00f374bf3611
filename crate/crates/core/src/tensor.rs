//! Dense row-major matrices and vectors, the matvec kernels everything else
//! is built on, and the seeded generator used for synthetic weights.
//!
//! Every reduction here accumulates in ascending index order starting from
//! `+0.0`. Adding a `±0.0` summand to such an accumulator never changes its
//! bits, so a product whose activation factor is exactly zero can be skipped
//! without perturbing the result. The sparse kernels rely on this to match the
//! dense path bit for bit.

use std::fmt::Debug;
use std::ops::Index;

use num_traits::Float;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

/// Floating point element type. `f32` is the production path, `f64` exists for
/// gradient checks.
pub trait Real: Float + Debug + Default + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn cast<T: Real>(v: f64) -> T {
    T::from(v).expect("f64 is representable in every Real")
}

#[inline]
pub(crate) fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().expect("Real converts to f64")
}

fn check_finite<T: Real>(data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector<T = f32> {
    data: Vec<T>,
}

impl<T: Real> Vector<T> {
    /// Wraps `data`, rejecting NaN and infinities.
    pub fn new(data: Vec<T>) -> Result<Self> {
        check_finite(&data)?;
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![T::zero(); len],
        }
    }

    pub fn from_fn(len: usize, f: impl FnMut(usize) -> T) -> Self {
        Self {
            data: (0..len).map(f).collect(),
        }
    }

    pub fn gaussian(len: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let normal = normal(std)?;
        Ok(Self::from_fn(len, |_| cast(normal.sample(rng))))
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    /// Euclidean norm, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| {
                let v = to_f64(v);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// `‖self − other‖₂`, accumulated in f64.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        if self.len() != other.len() {
            return Err(shape_err("distance", self.len(), other.len()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = to_f64(a) - to_f64(b);
                d * d
            })
            .sum::<f64>()
            .sqrt())
    }

    /// `‖self − reference‖ / ‖reference‖`, defined as 0 when both are zero.
    pub fn relative_deviation(&self, reference: &Self) -> Result<f64> {
        let dist = self.distance(reference)?;
        let base = reference.norm();
        if base == 0.0 {
            Ok(if dist == 0.0 { 0.0 } else { f64::INFINITY })
        } else {
            Ok(dist / base)
        }
    }

    pub fn cast<U: Real>(&self) -> Vector<U> {
        Vector {
            data: self.data.iter().map(|&v| cast(to_f64(v))).collect(),
        }
    }

    /// True when both vectors have identical bit patterns (distinguishes ±0).
    pub fn bitwise_eq(&self, other: &Self) -> bool
    where
        T: ToBits,
    {
        self.len() == other.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }
}

impl<T> Index<usize> for Vector<T> {
    type Output = T;

    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

/// Raw bit access, for bitwise comparisons and checksums.
pub trait ToBits {
    fn to_bits_u64(self) -> u64;
}

impl ToBits for f32 {
    fn to_bits_u64(self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl ToBits for f64 {
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Wraps row-major `data`; the length must be `rows * cols` and every entry finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::from_vec",
                format!("{} elements ({rows}x{cols})", rows * cols),
                data.len(),
            ));
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(shape_err("Matrix::from_rows", cols, bad.len()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    /// I.i.d. `N(0, std²)` entries drawn in row-major order.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "gaussian matrix needs positive dimensions, got {rows}x{cols}"
            )));
        }
        let normal = normal(std)?;
        Ok(Self::from_fn(rows, cols, |_, _| cast(normal.sample(rng))))
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![T::zero(); self.data.len()];
        // Blocked to keep both sides cache friendly on large weights.
        const B: usize = 64;
        for i0 in (0..self.rows).step_by(B) {
            for j0 in (0..self.cols).step_by(B) {
                for i in i0..(i0 + B).min(self.rows) {
                    for j in j0..(j0 + B).min(self.cols) {
                        data[j * self.rows + i] = self.data[i * self.cols + j];
                    }
                }
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// `out[i] = Σ_j self[i,j]·x[j]`, ascending `j`.
    pub fn matvec(&self, x: &Vector<T>) -> Result<Vector<T>> {
        if x.len() != self.cols {
            return Err(shape_err(
                "matvec",
                format!("input of length {}", self.cols),
                x.len(),
            ));
        }
        let mut out = vec![T::zero(); self.rows];
        let rows: Vec<usize> = (0..self.rows).collect();
        dot_rows(self, &rows, x.as_slice(), &mut out);
        Ok(Vector { data: out })
    }

    /// `out[j] = Σ_i self[i,j]·v[i]`, ascending `i`.
    pub fn matvec_transposed(&self, v: &Vector<T>) -> Result<Vector<T>> {
        if v.len() != self.rows {
            return Err(shape_err(
                "matvec_transposed",
                format!("input of length {}", self.rows),
                v.len(),
            ));
        }
        let mut out = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            axpy(&mut out, v[i], self.row(i));
        }
        Ok(Vector { data: out })
    }

    /// Outer product `a ⊗ b`.
    pub fn outer(a: &Vector<T>, b: &Vector<T>) -> Self {
        Self::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
    }

    /// Frobenius norm, accumulated in f64. Dominates the spectral norm.
    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| {
                let v = to_f64(v);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| cast(to_f64(v))).collect(),
        }
    }
}

/// Free-function form of [`Matrix::matvec`].
pub fn matvec<T: Real>(m: &Matrix<T>, x: &Vector<T>) -> Result<Vector<T>> {
    m.matvec(x)
}

/// Free-function form of [`Matrix::gaussian`].
pub fn gaussian_matrix<T: Real>(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Result<Matrix<T>> {
    Matrix::gaussian(rows, cols, std, rng)
}

fn normal(std: f64) -> Result<Normal<f64>> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "standard deviation must be positive, got {std}"
        )));
    }
    Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Sequential dot product from `+0.0`.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// Dot products of the selected rows of `m` with `x`, written to `out` in
/// selection order. Rows are processed eight at a time with independent
/// accumulators; each accumulator still runs in ascending column order, so
/// every result equals [`dot`] exactly.
pub(crate) fn dot_rows<T: Real>(m: &Matrix<T>, rows: &[usize], x: &[T], out: &mut [T]) {
    debug_assert_eq!(rows.len(), out.len());
    let mut chunks = rows.chunks_exact(8);
    let mut o = 0;
    for chunk in &mut chunks {
        let r: [&[T]; 8] = std::array::from_fn(|k| m.row(chunk[k]));
        let mut acc = [T::zero(); 8];
        for (j, &xj) in x.iter().enumerate() {
            for k in 0..8 {
                acc[k] = acc[k] + r[k][j] * xj;
            }
        }
        out[o..o + 8].copy_from_slice(&acc);
        o += 8;
    }
    for &i in chunks.remainder() {
        out[o] = dot(m.row(i), x);
        o += 1;
    }
}

/// `y[i] = y[i] + a·x[i]`.
#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// `y += Σ_k coeffs[k]·m[rows[k]]`, adding rows in the order given. Eight
/// rows are fused per pass over `y`; each element still receives its terms
/// one at a time in selection order, so the result equals repeated [`axpy`].
pub(crate) fn axpy_rows<T: Real>(y: &mut [T], m: &Matrix<T>, rows: &[usize], coeffs: &[T]) {
    debug_assert_eq!(rows.len(), coeffs.len());
    let mut chunks = rows.chunks_exact(8);
    let mut c = coeffs.chunks_exact(8);
    for (chunk, a) in (&mut chunks).zip(&mut c) {
        let r: [&[T]; 8] = std::array::from_fn(|k| m.row(chunk[k]));
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = *yi;
            for k in 0..8 {
                acc = acc + a[k] * r[k][i];
            }
            *yi = acc;
        }
    }
    for (&j, &a) in chunks.remainder().iter().zip(c.remainder()) {
        axpy(y, a, m.row(j));
    }
}

/// Deterministic generator: ChaCha with 8 rounds seeded from a `u64`
/// (`rand_chacha::ChaCha8Rng::seed_from_u64`). The stream is identical on
/// every platform for a given seed.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        Self::ALGORITHM
    }

    /// Independent generator for sub-stream `stream`. Does not advance `self`.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        use rand::Rng as _;
        self.inner.random_range(0..n)
    }

    /// `k` distinct indices from `0..n`, sorted ascending.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut picked = rand::seq::index::sample(&mut self.inner, n, k.min(n)).into_vec();
        picked.sort_unstable();
        picked
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;
    use rand::RngCore;

    #[test]
    fn identity_matvec() {
        let m = Matrix::<f32>::identity(2);
        let y = m.matvec(&Vector::new(vec![3.0, 5.0]).unwrap()).unwrap();
        assert_eq!(y.as_slice(), &[3.0, 5.0]);
    }

    #[test]
    fn zero_matrix_annihilates() {
        let m = Matrix::<f32>::zeros(3, 4);
        let y = m.matvec(&Vector::new(vec![1.0, -2.0, 3.5, 7.0]).unwrap()).unwrap();
        assert_eq!(y.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn hand_computed_matvec() {
        let m = Matrix::from_rows(&[vec![1.0f32, 2.0], vec![3.0, 4.0]]).unwrap();
        let y = m.matvec(&Vector::new(vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(y.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matvec_rejects_bad_length() {
        let m = Matrix::<f32>::zeros(2, 3);
        let err = m.matvec(&Vector::zeros(2)).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matvec", .. }));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0f32, f32::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(Matrix::<f32>::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn blocked_rows_match_sequential_dot() {
        let mut rng = Rng::new(3);
        let m = Matrix::<f32>::gaussian(37, 29, 1.0, &mut rng).unwrap();
        let x = Vector::<f32>::gaussian(29, 1.0, &mut rng).unwrap();
        let y = m.matvec(&x).unwrap();
        for i in 0..37 {
            assert_eq!(y[i].to_bits(), dot(m.row(i), x.as_slice()).to_bits());
        }
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = Rng::new(9);
        let m = Matrix::<f32>::gaussian(70, 130, 1.0, &mut rng).unwrap();
        let t = m.transpose();
        assert_eq!(t.shape(), (130, 70));
        assert_eq!(t.get(5, 17), m.get(17, 5));
        assert_eq!(t.transpose(), m);
    }

    #[test]
    fn gaussian_is_deterministic() {
        let a = gaussian_matrix::<f32>(2, 2, 1.0, &mut Rng::new(42)).unwrap();
        let b = gaussian_matrix::<f32>(2, 2, 1.0, &mut Rng::new(42)).unwrap();
        assert_eq!(a, b);
        let c = gaussian_matrix::<f32>(2, 2, 1.0, &mut Rng::new(43)).unwrap();
        assert_ne!(a, c);
    }

    fn sample_mean_std(m: &Matrix<f32>) -> (f64, f64) {
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = m
            .as_slice()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        (mean, var.sqrt())
    }

    #[test]
    fn gaussian_sample_mean_is_near_zero() {
        let m = gaussian_matrix::<f32>(1000, 1000, 1.0, &mut Rng::new(1)).unwrap();
        let (mean, std) = sample_mean_std(&m);
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((std - 1.0).abs() < 0.01, "std {std}");
    }

    #[test]
    fn gaussian_small_std() {
        let m = gaussian_matrix::<f32>(4, 4, 0.02, &mut Rng::new(5)).unwrap();
        let (_, std) = sample_mean_std(&m);
        assert!(std > 0.01 && std < 0.03, "std {std}");
        assert!(m.as_slice().iter().all(|v| v.abs() < 0.2));
    }

    #[test]
    fn gaussian_rejects_bad_std() {
        assert!(gaussian_matrix::<f32>(2, 2, 0.0, &mut Rng::new(0)).is_err());
        assert!(gaussian_matrix::<f32>(2, 2, -1.0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn forks_are_independent_and_reproducible() {
        let root = Rng::new(11);
        let mut a = root.fork(1);
        let mut b = root.fork(2);
        let mut a2 = root.fork(1);
        let (x, y, z) = (a.next_u64(), b.next_u64(), a2.next_u64());
        assert_eq!(x, z);
        assert_ne!(x, y);
    }

    #[test]
    fn sample_indices_sorted_unique() {
        let mut rng = Rng::new(2);
        let idx = rng.sample_indices(100, 30);
        assert_eq!(idx.len(), 30);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    proptest! {
        #[test]
        fn matvec_is_linear_f64(seed in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let mut rng = Rng::new(seed);
            let m = Matrix::<f64>::gaussian(6, 9, 1.0, &mut rng).unwrap();
            let x = Vector::<f64>::gaussian(9, 1.0, &mut rng).unwrap();
            let y = Vector::<f64>::gaussian(9, 1.0, &mut rng).unwrap();
            let combo = Vector::from_fn(9, |j| alpha * x[j] + beta * y[j]);
            let lhs = m.matvec(&combo).unwrap();
            let mx = m.matvec(&x).unwrap();
            let my = m.matvec(&y).unwrap();
            let rhs = Vector::from_fn(6, |i| alpha * mx[i] + beta * my[i]);
            let scale = rhs.norm().max(1.0);
            prop_assert!(lhs.distance(&rhs).unwrap() / scale < 1e-12);
        }

        #[test]
        fn matvec_is_linear_f32(seed in 0u64..1000, alpha in -3.0f32..3.0, beta in -3.0f32..3.0) {
            let mut rng = Rng::new(seed);
            let m = Matrix::<f32>::gaussian(6, 9, 1.0, &mut rng).unwrap();
            let x = Vector::<f32>::gaussian(9, 1.0, &mut rng).unwrap();
            let y = Vector::<f32>::gaussian(9, 1.0, &mut rng).unwrap();
            let combo = Vector::from_fn(9, |j| alpha * x[j] + beta * y[j]);
            let lhs = m.matvec(&combo).unwrap();
            let mx = m.matvec(&x).unwrap();
            let my = m.matvec(&y).unwrap();
            let rhs = Vector::from_fn(6, |i| alpha * mx[i] + beta * my[i]);
            // Relative to the magnitude of the summands, which bounds f32 cancellation.
            let scale = (alpha.abs() as f64 * mx.norm() + beta.abs() as f64 * my.norm()).max(1.0);
            prop_assert!(lhs.distance(&rhs).unwrap() / scale < 1e-5);
        }

        #[test]
        fn transposed_matvec_matches_transpose(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let m = Matrix::<f64>::gaussian(5, 7, 1.0, &mut rng).unwrap();
            let v = Vector::<f64>::gaussian(5, 1.0, &mut rng).unwrap();
            let a = m.matvec_transposed(&v).unwrap();
            let b = m.transpose().matvec(&v).unwrap();
            prop_assert!(a.bitwise_eq(&b));
        }
    }
}
