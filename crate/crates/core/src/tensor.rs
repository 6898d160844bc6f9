//! Dense linear algebra and seeded sampling for the numerical core.
//!
//! Everything here is `f64`. Matrices are row-major; the GEMM kernel is
//! `matrixmultiply::dgemm`, which is single-threaded and deterministic, so two
//! runs with the same inputs produce bit-identical products.

use std::f64::consts::PI;
use std::ops::{Index, IndexMut};

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {diff}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
}

pub type Result<T> = std::result::Result<T, TensorError>;

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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice yields a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TensorError::DimensionMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so zero-width matrices yield empty rows explicitly
        let cols = self.cols;
        (0..self.rows).map(move |i| &self.data[i * cols..(i + 1) * cols])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        DenseMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows > 0 && other.rows > 0 && self.cols != other.cols {
            return Err(TensorError::DimensionMismatch(format!(
                "cannot stack {} columns on {} columns",
                other.cols, self.cols
            )));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(DenseMatrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    /// `self · other`
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(TensorError::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            (&self.data, self.cols, 1),
            (&other.data, other.cols, 1),
            &mut out.data,
            0.0,
        );
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_transpose(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.cols {
            return Err(TensorError::DimensionMismatch(format!(
                "{}x{} times ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            (&self.data, self.cols, 1),
            (&other.data, 1, other.cols),
            &mut out.data,
            0.0,
        );
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn transpose_matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows {
            return Err(TensorError::DimensionMismatch(format!(
                "({}x{})ᵀ times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.cols, other.cols);
        gemm(
            self.cols,
            self.rows,
            other.cols,
            (&self.data, 1, self.cols),
            (&other.data, other.cols, 1),
            &mut out.data,
            0.0,
        );
        Ok(out)
    }

    /// Lower-triangular matrix–vector product `self · v`.
    pub fn lower_mul_vec(&self, v: &[f64], out: &mut [f64]) {
        let n = self.rows;
        for i in 0..n {
            let row = self.row(i);
            out[i] = row[..=i].iter().zip(&v[..=i]).map(|(a, b)| a * b).sum();
        }
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `c ← a·b + beta·c` for an m×k `a` and k×n `b`, each given as
/// (data, row stride, column stride). `c` is row-major m×n.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides and extents describe in-bounds views of the slices; the
    // callers above derive them from the matrix shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// Returns lower-triangular `L` with `L·Lᵀ = a` and a strictly positive diagonal.
/// A non-positive pivot is reported as [`TensorError::NotPositiveDefinite`];
/// no jitter is added here.
pub fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows();
    if n != a.cols() || n == 0 {
        return Err(TensorError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let scale = 1.0 + a.max_abs();
    for i in 0..n {
        for j in 0..i {
            let diff = (a[(i, j)] - a[(j, i)]).abs();
            if diff > 1e-9 * scale {
                return Err(TensorError::NotSymmetric { i, j, diff });
            }
        }
    }

    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let lj = l.row(j);
        let pivot = a[(j, j)] - lj[..j].iter().map(|v| v * v).sum::<f64>();
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(TensorError::NotPositiveDefinite { row: j, pivot });
        }
        let diag = pivot.sqrt();
        l[(j, j)] = diag;
        for i in j + 1..n {
            let (head, tail) = l.data.split_at_mut(i * n);
            let rj = &head[j * n..j * n + j];
            let ri = &mut tail[..n];
            let dot: f64 = ri[..j].iter().zip(rj).map(|(x, y)| x * y).sum();
            ri[j] = (a[(i, j)] - dot) / diag;
        }
    }
    Ok(l)
}

/// Solves `L·y = b` in place for lower-triangular `L`.
pub fn solve_lower_in_place(chol: &DenseMatrix, b: &mut [f64]) {
    let n = chol.rows();
    for i in 0..n {
        let row = chol.row(i);
        let s: f64 = row[..i].iter().zip(&b[..i]).map(|(x, y)| x * y).sum();
        b[i] = (b[i] - s) / row[i];
    }
}

/// `Σ ln L_ii`, i.e. half the log-determinant of `L·Lᵀ`.
pub fn log_det_chol(chol: &DenseMatrix) -> f64 {
    (0..chol.rows()).map(|i| chol[(i, i)].ln()).sum()
}

fn check_gaussian_dims(mean: &[f64], chol: &DenseMatrix) -> Result<()> {
    let d = mean.len();
    if chol.rows() != d || chol.cols() != d {
        return Err(TensorError::DimensionMismatch(format!(
            "mean has {d} entries, cholesky factor is {}x{}",
            chol.rows(),
            chol.cols()
        )));
    }
    Ok(())
}

/// Log density of `N(x | mean, L·Lᵀ)`.
pub fn mvn_logpdf(x: &[f64], mean: &[f64], chol: &DenseMatrix) -> Result<f64> {
    check_gaussian_dims(mean, chol)?;
    if x.len() != mean.len() {
        return Err(TensorError::DimensionMismatch(format!(
            "x has {} entries, mean has {}",
            x.len(),
            mean.len()
        )));
    }
    let mut r: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    solve_lower_in_place(chol, &mut r);
    let maha: f64 = r.iter().map(|v| v * v).sum();
    let d = mean.len() as f64;
    Ok(-0.5 * d * (2.0 * PI).ln() - log_det_chol(chol) - 0.5 * maha)
}

/// Draws `n` rows `mean + L·z`, `z ~ N(0, I)`.
pub fn mvn_sample(mean: &[f64], chol: &DenseMatrix, n: usize, rng: &mut Rng) -> Result<DenseMatrix> {
    check_gaussian_dims(mean, chol)?;
    let d = mean.len();
    let mut out = DenseMatrix::zeros(n, d);
    let mut z = vec![0.0; d];
    let mut lz = vec![0.0; d];
    for i in 0..n {
        z.iter_mut().for_each(|v| *v = rng.normal());
        chol.lower_mul_vec(&z, &mut lz);
        for ((o, m), v) in out.row_mut(i).iter_mut().zip(mean).zip(&lz) {
            *o = m + v;
        }
    }
    Ok(out)
}

pub fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded pseudo-random stream.
///
/// Backed by ChaCha8 keyed through `ChaCha8Rng::seed_from_u64(seed)`. Normal
/// variates use the ziggurat sampler from `rand_distr::StandardNormal`.
/// [`Rng::split`] derives a child seed by SplitMix64-mixing the parent seed,
/// the parent's current word position and the label, so children depend on
/// where the parent is in its stream but splitting never advances the parent.
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

    pub fn split(&self, label: u64) -> Rng {
        let pos = self.inner.get_word_pos();
        let mut h = splitmix64(self.seed);
        h = splitmix64(h ^ pos as u64);
        h = splitmix64(h ^ (pos >> 64) as u64);
        h = splitmix64(h ^ splitmix64(label ^ 0xA076_1D64_78BD_642F));
        Rng::new(h)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `amount` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, amount).into_vec()
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

    fn random_spd(d: usize, rng: &mut Rng) -> DenseMatrix {
        let b = DenseMatrix::from_vec(d, d, standard_normal(rng, d * d)).unwrap();
        let mut a = b.transpose_matmul(&b).unwrap();
        for i in 0..d {
            a[(i, i)] += 1e-3;
        }
        a
    }

    /// Gauss-Jordan inverse and determinant, kept independent of the Cholesky path.
    fn naive_inverse_det(a: &DenseMatrix) -> (DenseMatrix, f64) {
        let n = a.rows();
        let mut m = a.clone();
        let mut inv = DenseMatrix::identity(n);
        let mut det = 1.0;
        for c in 0..n {
            let p = (c..n)
                .max_by(|&x, &y| m[(x, c)].abs().partial_cmp(&m[(y, c)].abs()).unwrap())
                .unwrap();
            if p != c {
                for j in 0..n {
                    let t = m[(c, j)];
                    m[(c, j)] = m[(p, j)];
                    m[(p, j)] = t;
                    let t = inv[(c, j)];
                    inv[(c, j)] = inv[(p, j)];
                    inv[(p, j)] = t;
                }
                det = -det;
            }
            let piv = m[(c, c)];
            det *= piv;
            for j in 0..n {
                m[(c, j)] /= piv;
                inv[(c, j)] /= piv;
            }
            for r in 0..n {
                if r != c {
                    let f = m[(r, c)];
                    for j in 0..n {
                        m[(r, j)] -= f * m[(c, j)];
                        inv[(r, j)] -= f * inv[(c, j)];
                    }
                }
            }
        }
        (inv, det)
    }

    fn naive_logpdf(x: &[f64], mean: &[f64], cov: &DenseMatrix) -> f64 {
        let d = x.len();
        let (inv, det) = naive_inverse_det(cov);
        let r: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
        let mut q = 0.0;
        for i in 0..d {
            for j in 0..d {
                q += r[i] * inv[(i, j)] * r[j];
            }
        }
        -0.5 * d as f64 * (2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * q
    }

    fn reconstruct(l: &DenseMatrix) -> DenseMatrix {
        l.matmul_transpose(l).unwrap()
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(l, DenseMatrix::identity(3));
    }

    #[test]
    fn cholesky_two_by_two_reconstructs() {
        let a = DenseMatrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]]).unwrap();
        let l = cholesky(&a).unwrap();
        assert_eq!(l[(0, 1)], 0.0);
        assert!(l[(0, 0)] > 0.0 && l[(1, 1)] > 0.0);
        let r = reconstruct(&l);
        for i in 0..2 {
            for j in 0..2 {
                assert!((r[(i, j)] - a[(i, j)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert!(matches!(
            cholesky(&a),
            Err(TensorError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let a = DenseMatrix::from_rows(&[[2.0, 1.0], [0.0, 2.0]]).unwrap();
        assert!(matches!(cholesky(&a), Err(TensorError::NotSymmetric { .. })));
    }

    #[test]
    fn cholesky_random_spd_reconstruction() {
        let mut rng = Rng::new(11);
        for trial in 0..100 {
            let d = 1 + (trial * 7) % 64;
            let a = random_spd(d, &mut rng);
            let l = cholesky(&a).unwrap();
            let r = reconstruct(&l);
            let tol = 1e-9 * (1.0 + a.max_abs());
            for (x, y) in r.as_slice().iter().zip(a.as_slice()) {
                assert!((x - y).abs() <= tol, "d={d}: {x} vs {y}");
            }
            for i in 0..d {
                assert!(l[(i, i)] > 0.0);
                for j in i + 1..d {
                    assert_eq!(l[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn logpdf_standard_normal_at_zero() {
        let v = mvn_logpdf(&[0.0], &[0.0], &DenseMatrix::identity(1)).unwrap();
        assert!((v - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn logpdf_at_mean_is_normalizer() {
        let a = DenseMatrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]]).unwrap();
        let l = cholesky(&a).unwrap();
        let v = mvn_logpdf(&[1.0, -2.0], &[1.0, -2.0], &l).unwrap();
        let expected = -(2.0 * PI).ln() - log_det_chol(&l);
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn logpdf_diagonal_matches_dense_formula() {
        let cov = DenseMatrix::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap();
        let l = cholesky(&cov).unwrap();
        let v = mvn_logpdf(&[1.0, 1.0], &[0.0, 0.0], &l).unwrap();
        // |Σ| = 4, xᵀΣ⁻¹x = 1
        let expected = -(2.0 * PI).ln() - 0.5 * 4.0_f64.ln() - 0.5;
        assert!((v - expected).abs() < 1e-12);
        assert!((v - naive_logpdf(&[1.0, 1.0], &[0.0, 0.0], &cov)).abs() < 1e-12);
    }

    #[test]
    fn logpdf_matches_naive_on_random_spd() {
        let mut rng = Rng::new(5);
        for trial in 0..60 {
            let d = 1 + trial % 16;
            let cov = random_spd(d, &mut rng);
            let l = cholesky(&cov).unwrap();
            let x = standard_normal(&mut rng, d);
            let mean = standard_normal(&mut rng, d);
            let fast = mvn_logpdf(&x, &mean, &l).unwrap();
            let slow = naive_logpdf(&x, &mean, &cov);
            assert!(
                (fast - slow).abs() <= 1e-8 * slow.abs().max(1.0),
                "d={d}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn logpdf_dimension_mismatch() {
        let r = mvn_logpdf(&[0.0, 0.0], &[0.0], &DenseMatrix::identity(1));
        assert!(matches!(r, Err(TensorError::DimensionMismatch(_))));
    }

    #[test]
    fn zero_factor_sample_is_mean() {
        let mut rng = Rng::new(1);
        let s = mvn_sample(&[1.5, -2.0], &DenseMatrix::zeros(2, 2), 50, &mut rng).unwrap();
        for r in s.row_iter() {
            assert_eq!(r, &[1.5, -2.0]);
        }
    }

    #[test]
    fn sample_moments_converge() {
        let n = 100_000;
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let s = mvn_sample(&[0.0, 0.0], &DenseMatrix::identity(2), n, &mut rng).unwrap();
            let mut mean = [0.0; 2];
            for r in s.row_iter() {
                mean[0] += r[0];
                mean[1] += r[1];
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut cov = [[0.0; 2]; 2];
            for r in s.row_iter() {
                for i in 0..2 {
                    for j in 0..2 {
                        cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
                    }
                }
            }
            for i in 0..2 {
                assert!(mean[i].abs() < 0.02, "seed {seed}: mean {mean:?}");
                for j in 0..2 {
                    let target = if i == j { 1.0 } else { 0.0 };
                    assert!((cov[i][j] / n as f64 - target).abs() < 0.05);
                }
            }
        }
    }

    #[test]
    fn sample_is_deterministic() {
        let l = cholesky(&DenseMatrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]]).unwrap()).unwrap();
        let a = mvn_sample(&[0.0, 1.0], &l, 100, &mut Rng::new(9)).unwrap();
        let b = mvn_sample(&[0.0, 1.0], &l, 100, &mut Rng::new(9)).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn standard_normal_empty_and_moments() {
        assert!(standard_normal(&mut Rng::new(0), 0).is_empty());
        let v = standard_normal(&mut Rng::new(3), 1_000_000);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.01);
        assert_eq!(
            standard_normal(&mut Rng::new(4), 32),
            standard_normal(&mut Rng::new(4), 32)
        );
    }

    #[test]
    fn split_does_not_advance_parent_and_depends_on_label() {
        let parent = Rng::new(42);
        let mut a = parent.split(1);
        let mut b = parent.split(1);
        let mut c = parent.split(2);
        assert_eq!(a.next_u64(), b.next_u64());
        assert_ne!(parent.split(1).next_u64(), c.next_u64());
        let mut p1 = parent.clone();
        let mut p2 = parent.clone();
        let _ = p1.split(7);
        assert_eq!(p1.next_u64(), p2.next_u64());
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = Rng::new(2);
        let a = DenseMatrix::from_vec(3, 4, standard_normal(&mut rng, 12)).unwrap();
        let b = DenseMatrix::from_vec(4, 5, standard_normal(&mut rng, 20)).unwrap();
        let ab = a.matmul(&b).unwrap();
        let ab2 = a.matmul_transpose(&b.transpose()).unwrap();
        let ab3 = a.transpose().transpose_matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let direct: f64 = (0..4).map(|k| a[(i, k)] * b[(k, j)]).sum();
                assert!((ab[(i, j)] - direct).abs() < 1e-12);
                assert!((ab2[(i, j)] - direct).abs() < 1e-12);
                assert!((ab3[(i, j)] - direct).abs() < 1e-12);
            }
        }
    }
}
