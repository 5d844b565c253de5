//! Dense linear algebra, seeded random streams and Gaussian sampling.
//!
//! Everything is `f64`. Matrices are row-major [`Tensor`]s of rank 2; vectors
//! are rank-1 tensors or plain slices where that is more convenient.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized axis in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        Tensor::from_fn(c, r, |i, j| self.data[j * c + i])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Row-major general matrix multiply on raw slices:
/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m×k` and `op(b)`
/// is `k×n`. `trans_*` selects the transposed view of a stored row-major
/// matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths are checked above against the m/k/n extents and
    // the strides describe exactly those row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() {
        return Err(Error::shape(
            "matmul",
            format!("expected matrices, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions {k} and {k2} disagree"),
        ));
    }
    let mut c = Tensor::zeros(&[m, n]);
    gemm(m, k, n, 1.0, a.data(), false, b.data(), false, 0.0, c.data_mut());
    Ok(c)
}

/// Matrix-vector product `a · x`.
pub fn matvec(a: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    if !a.is_matrix() || a.cols() != x.len() {
        return Err(Error::shape(
            "matvec",
            format!("matrix {:?} times vector of length {}", a.shape(), x.len()),
        ));
    }
    Ok((0..a.rows()).map(|i| dot(a.row(i), x)).collect())
}

/// Transposed matrix-vector product `aᵀ · x`.
pub fn matvec_t(a: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    if !a.is_matrix() || a.rows() != x.len() {
        return Err(Error::shape(
            "matvec_t",
            format!("transpose of {:?} times vector of length {}", a.shape(), x.len()),
        ));
    }
    let mut out = vec![0.0; a.cols()];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(a.row(i)) {
            *o += v * xi;
        }
    }
    Ok(out)
}

const SYMMETRY_TOL: f64 = 1e-10;

fn check_square_symmetric(m: &Tensor, op: &'static str) -> Result<usize> {
    if !m.is_matrix() || m.rows() != m.cols() {
        return Err(Error::shape(op, format!("expected a square matrix, got {:?}", m.shape())));
    }
    let n = m.rows();
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            let asym = (m.at(i, j) - m.at(j, i)).abs();
            if asym > SYMMETRY_TOL * scale {
                return Err(Error::NotSymmetric {
                    row: i,
                    col: j,
                    asymmetry: asym,
                });
            }
        }
    }
    Ok(n)
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = m`.
///
/// Only the lower triangle of `m` is read once symmetry has been checked.
pub fn cholesky(m: &Tensor) -> Result<Tensor> {
    let n = check_square_symmetric(m, "cholesky")?;
    let mut l = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let mut d = m.at(j, j);
        for k in 0..j {
            d -= l.at(j, k) * l.at(j, k);
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = m.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Ok(l)
}

fn forward_substitute(l: &Tensor, b: &mut [f64]) {
    let n = l.rows();
    for i in 0..n {
        let row = l.row(i);
        let s = dot(&row[..i], &b[..i]);
        b[i] = (b[i] - s) / row[i];
    }
}

fn back_substitute_t(l: &Tensor, b: &mut [f64]) {
    let n = l.rows();
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l.at(k, i) * b[k];
        }
        b[i] = s / l.at(i, i);
    }
}

/// Solves `m · x = b` for SPD `m`. `b` is a vector or a matrix whose columns
/// are independent right-hand sides.
pub fn solve_spd(m: &Tensor, b: &Tensor) -> Result<Tensor> {
    let l = cholesky(m)?;
    SpdMatrix::from_factor_unchecked(l).solve(b)
}

/// Symmetric positive-definite matrix kept as its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    factor: Tensor,
}

impl SpdMatrix {
    pub fn new(dense: &Tensor) -> Result<Self> {
        Ok(Self {
            factor: cholesky(dense)?,
        })
    }

    fn from_factor_unchecked(factor: Tensor) -> Self {
        Self { factor }
    }

    /// `scale · I` of the given dimension.
    pub fn scaled_identity(dim: usize, scale: f64) -> Result<Self> {
        Self::diagonal(&vec![scale; dim])
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty diagonal".into()));
        }
        let mut l = Tensor::zeros(&[n, n]);
        for (i, &d) in diag.iter().enumerate() {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: i, value: d });
            }
            l.set(i, i, d.sqrt());
        }
        Ok(Self { factor: l })
    }

    pub fn dim(&self) -> usize {
        self.factor.rows()
    }

    pub fn factor(&self) -> &Tensor {
        &self.factor
    }

    /// Reconstructs `L·Lᵀ`.
    pub fn dense(&self) -> Tensor {
        let n = self.dim();
        let mut out = Tensor::zeros(&[n, n]);
        let l = self.factor.data();
        gemm(n, n, n, 1.0, l, false, l, true, 0.0, out.data_mut());
        // exact symmetry
        for i in 0..n {
            for j in 0..i {
                let v = out.at(i, j);
                out.set(j, i, v);
            }
        }
        out
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim() {
            return Err(Error::DimMismatch {
                what: "spd solve right-hand side",
                expected: self.dim(),
                actual: b.len(),
            });
        }
        let mut x = b.to_vec();
        forward_substitute(&self.factor, &mut x);
        back_substitute_t(&self.factor, &mut x);
        Ok(x)
    }

    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        let n = self.dim();
        match b.shape() {
            [len] => Ok(Tensor::vector(self.solve_vec(&vec_of(b, *len))?)),
            [rows, cols] if *rows == n => {
                let mut out = Tensor::zeros(&[n, *cols]);
                let mut col = vec![0.0; n];
                for j in 0..*cols {
                    for i in 0..n {
                        col[i] = b.at(i, j);
                    }
                    forward_substitute(&self.factor, &mut col);
                    back_substitute_t(&self.factor, &mut col);
                    for i in 0..n {
                        out.set(i, j, col[i]);
                    }
                }
                Ok(out)
            }
            s => Err(Error::shape(
                "solve_spd",
                format!("matrix of dim {n} against right-hand side {s:?}"),
            )),
        }
    }

    pub fn inverse(&self) -> Tensor {
        let inv = self
            .solve(&Tensor::identity(self.dim()))
            .expect("identity has matching shape");
        symmetrize(&inv)
    }

    /// `log det` of the full matrix.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.factor.at(i, i).ln()).sum::<f64>()
    }

    /// `L⁻¹ v`, so that `‖L⁻¹ v‖²` is the Mahalanobis quadratic form.
    pub fn whiten(&self, v: &[f64]) -> Vec<f64> {
        let mut w = v.to_vec();
        forward_substitute(&self.factor, &mut w);
        w
    }

    /// `L · z`.
    pub fn color(&self, z: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n).map(|i| dot(&self.factor.row(i)[..=i], &z[..=i])).collect()
    }
}

fn vec_of(t: &Tensor, len: usize) -> Vec<f64> {
    t.data()[..len].to_vec()
}

/// `(m + mᵀ) / 2`.
pub fn symmetrize(m: &Tensor) -> Tensor {
    let n = m.rows();
    Tensor::from_fn(n, n, |i, j| 0.5 * (m.at(i, j) + m.at(j, i)))
}

/// Seeded pseudo-random stream.
///
/// Backed by ChaCha20, whose output is specified bit-for-bit and therefore
/// identical across platforms. [`Rng::stream`] derives independent child
/// streams from the original seed plus a key path, which is how per-record
/// and per-stage randomness is kept reproducible under parallel evaluation.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha20Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream keyed by `path`. Depends only on the original seed, not on
    /// how much of this stream has been consumed.
    pub fn stream(&self, path: &[u64]) -> Rng {
        let mut h = splitmix64(self.seed);
        for &k in path {
            h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019)));
        }
        Rng::new(h)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.standard_normal();
        }
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.inner.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
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

/// One draw from `N(mean, cov)` as `mean + L·z`.
pub fn sample_gaussian(rng: &mut Rng, mean: &[f64], cov: &SpdMatrix) -> Result<Tensor> {
    if mean.len() != cov.dim() {
        return Err(Error::DimMismatch {
            what: "gaussian mean",
            expected: cov.dim(),
            actual: mean.len(),
        });
    }
    let mut z = vec![0.0; mean.len()];
    rng.fill_standard_normal(&mut z);
    let lz = cov.color(&z);
    Ok(Tensor::vector(
        mean.iter().zip(&lz).map(|(m, v)| m + v).collect(),
    ))
}

/// Unbiased sample mean and covariance of the rows of `samples`.
pub fn sample_moments(samples: &Tensor) -> (Vec<f64>, Tensor) {
    let (n, d) = (samples.rows(), samples.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(samples.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = samples.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut cov = Tensor::zeros(&[d, d]);
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    gemm(
        d,
        n,
        d,
        1.0 / denom,
        centered.data(),
        true,
        centered.data(),
        false,
        0.0,
        cov.data_mut(),
    );
    (mean, symmetrize(&cov))
}
