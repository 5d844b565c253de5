//! Inverse problems `y = F(x) + ε` with Gaussian noise: the interface used by
//! the rest of the crate, the linear-Gaussian instance with its closed-form
//! posterior, and a small nonlinear limited-view image problem.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, matmul, matvec, matvec_t, sample_gaussian, symmetrize, Rng, SpdMatrix, Tensor};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(Error::DimMismatch {
            what,
            expected,
            actual: v.len(),
        })
    }
}

/// Gaussian-noise inverse problem.
///
/// Implementors provide the forward map, the adjoint of its Jacobian and a
/// prior sampler; likelihood, score and simulation follow from those.
pub trait InverseProblem: Send + Sync {
    fn x_dim(&self) -> usize;
    fn y_dim(&self) -> usize;

    /// `F(x)`.
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// `J(x)ᵀ v` where `J` is the Jacobian of `F` at `x`.
    fn jacobian_t(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>>;

    /// Noise covariance `Σ_ε`.
    fn noise(&self) -> &SpdMatrix;

    fn sample_prior(&self, rng: &mut Rng) -> Vec<f64>;

    /// Starting fiducial `x₀`; never depends on the observation.
    fn default_fiducial(&self) -> Vec<f64>;

    /// Dynamic range of parameter values, used as the PSNR peak.
    fn value_range(&self) -> f64;

    /// `(rows, cols)` when parameters are an image.
    fn image_shape(&self) -> Option<(usize, usize)> {
        None
    }

    /// Per-coordinate flag for coordinates that influence the data, when
    /// the problem has a meaningful observed region.
    fn observed_region(&self) -> Option<Vec<bool>> {
        None
    }

    fn has_analytic_posterior(&self) -> bool {
        false
    }

    fn analytic_posterior(&self, _y: &[f64]) -> Result<AnalyticPosterior> {
        Err(Error::NoAnalyticPosterior)
    }

    /// `F(x) + ε`, one noise draw.
    fn simulate(&self, x: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        check_len("parameter vector", x, self.x_dim())?;
        let fx = self.forward(x)?;
        Ok(sample_gaussian(rng, &fx, self.noise())?.into_data())
    }

    /// `log p(y | x)` including the normalization constant.
    fn log_likelihood(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_len("parameter vector", x, self.x_dim())?;
        check_len("observation", y, self.y_dim())?;
        let fx = self.forward(x)?;
        let r: Vec<f64> = y.iter().zip(&fx).map(|(a, b)| a - b).collect();
        let w = self.noise().whiten(&r);
        Ok(-0.5 * dot(&w, &w) - 0.5 * self.noise().log_det() - self.y_dim() as f64 * HALF_LN_2PI)
    }

    /// Score summary `∇ₓ log p(y | x)` at `x0`: `J(x0)ᵀ Σ_ε⁻¹ (y − F(x0))`.
    fn score(&self, x0: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        check_len("fiducial", x0, self.x_dim())?;
        check_len("observation", y, self.y_dim())?;
        let fx = self.forward(x0)?;
        let r: Vec<f64> = y.iter().zip(&fx).map(|(a, b)| a - b).collect();
        let w = self.noise().solve_vec(&r)?;
        self.jacobian_t(x0, &w)
    }
}

/// Closed-form Gaussian posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticPosterior {
    pub mean: Vec<f64>,
    pub covariance: Tensor,
    covariance_spd: SpdMatrix,
}

impl AnalyticPosterior {
    pub fn new(mean: Vec<f64>, covariance: Tensor) -> Result<Self> {
        let covariance_spd = SpdMatrix::new(&covariance)?;
        check_len("posterior mean", &mean, covariance_spd.dim())?;
        Ok(Self {
            mean,
            covariance,
            covariance_spd,
        })
    }

    pub fn covariance_spd(&self) -> &SpdMatrix {
        &self.covariance_spd
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        sample_gaussian(rng, &self.mean, &self.covariance_spd)
            .expect("dimensions fixed at construction")
            .into_data()
    }
}

/// `y = A x + ε` with `x ~ N(μ_x, Σ_x)`, `ε ~ N(0, Σ_ε)`.
#[derive(Debug, Clone)]
pub struct LinearGaussianProblem {
    a: Tensor,
    prior_mean: Vec<f64>,
    prior_cov: SpdMatrix,
    noise_cov: SpdMatrix,
    value_range: f64,
}

impl LinearGaussianProblem {
    pub fn new(a: Tensor, prior_mean: Vec<f64>, prior_cov: SpdMatrix, noise_cov: SpdMatrix) -> Result<Self> {
        if !a.is_matrix() {
            return Err(Error::shape("linear problem", "operator must be a matrix"));
        }
        check_len("prior mean", &prior_mean, a.cols())?;
        if prior_cov.dim() != a.cols() {
            return Err(Error::DimMismatch {
                what: "prior covariance",
                expected: a.cols(),
                actual: prior_cov.dim(),
            });
        }
        if noise_cov.dim() != a.rows() {
            return Err(Error::DimMismatch {
                what: "noise covariance",
                expected: a.rows(),
                actual: noise_cov.dim(),
            });
        }
        // ±4 prior standard deviations around the widest coordinate
        let dense = prior_cov.dense();
        let max_sd = (0..a.cols()).map(|i| dense.at(i, i).sqrt()).fold(0.0, f64::max);
        Ok(Self {
            a,
            prior_mean,
            prior_cov,
            noise_cov,
            value_range: 8.0 * max_sd,
        })
    }

    /// Randomized instance: `A` with i.i.d. `N(0, 1/x_dim)` entries, `Σ_x`
    /// a random rotation of eigenvalues spaced geometrically from 1 down to
    /// `1/prior_condition`, `Σ_ε = noise_std² I`, `μ_x = 0`.
    pub fn replication(config: &LinearConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (n, m) = (config.x_dim, config.y_dim);
        let mut rng = Rng::new(seed).stream(&[0x4c49_4e45]);
        let scale = 1.0 / (n as f64).sqrt();
        let a = Tensor::from_fn(m, n, |_, _| scale * rng.standard_normal());
        let q = random_orthogonal(n, &mut rng);
        let eig: Vec<f64> = (0..n)
            .map(|i| {
                let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                config.prior_condition.powf(-t)
            })
            .collect();
        let qd = Tensor::from_fn(n, n, |i, j| q.at(i, j) * eig[j]);
        let prior = symmetrize(&matmul(&qd, &q.transpose())?);
        Self::new(
            a,
            vec![0.0; n],
            SpdMatrix::new(&prior)?,
            SpdMatrix::scaled_identity(m, config.noise_std * config.noise_std)?,
        )
    }

    pub fn operator(&self) -> &Tensor {
        &self.a
    }

    pub fn prior_mean(&self) -> &[f64] {
        &self.prior_mean
    }

    pub fn prior_cov(&self) -> &SpdMatrix {
        &self.prior_cov
    }

    /// Posterior precision `Σ_x⁻¹ + Aᵀ Σ_ε⁻¹ A`.
    pub fn posterior_precision(&self) -> Tensor {
        let noise_inv_a = self.noise_cov.solve(&self.a).expect("shapes checked at construction");
        let data_term = matmul(&self.a.transpose(), &noise_inv_a).expect("shapes checked");
        symmetrize(&self.prior_cov.inverse().add(&data_term).expect("same shape"))
    }
}

/// Gram-Schmidt orthonormalization of a Gaussian matrix.
fn random_orthogonal(n: usize, rng: &mut Rng) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v = vec![0.0; n];
        rng.fill_standard_normal(&mut v);
        for c in &cols {
            let p = dot(&v, c);
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let nv = dot(&v, &v).sqrt();
        if nv > 1e-8 {
            v.iter_mut().for_each(|a| *a /= nv);
            cols.push(v);
        }
    }
    Tensor::from_fn(n, n, |i, j| cols[j][i])
}

impl InverseProblem for LinearGaussianProblem {
    fn x_dim(&self) -> usize {
        self.a.cols()
    }

    fn y_dim(&self) -> usize {
        self.a.rows()
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("parameter vector", x, self.x_dim())?;
        matvec(&self.a, x)
    }

    fn jacobian_t(&self, _x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        matvec_t(&self.a, v)
    }

    fn noise(&self) -> &SpdMatrix {
        &self.noise_cov
    }

    fn sample_prior(&self, rng: &mut Rng) -> Vec<f64> {
        sample_gaussian(rng, &self.prior_mean, &self.prior_cov)
            .expect("dimensions fixed at construction")
            .into_data()
    }

    fn default_fiducial(&self) -> Vec<f64> {
        vec![0.0; self.x_dim()]
    }

    fn value_range(&self) -> f64 {
        self.value_range
    }

    fn has_analytic_posterior(&self) -> bool {
        true
    }

    /// `C = (Σ_x⁻¹ + AᵀΣ_ε⁻¹A)⁻¹`, `m = C (AᵀΣ_ε⁻¹ y + Σ_x⁻¹ μ_x)`.
    fn analytic_posterior(&self, y: &[f64]) -> Result<AnalyticPosterior> {
        check_len("observation", y, self.y_dim())?;
        let precision = SpdMatrix::new(&self.posterior_precision())?;
        let cov = precision.inverse();
        let data = matvec_t(&self.a, &self.noise_cov.solve_vec(y)?)?;
        let prior = self.prior_cov.solve_vec(&self.prior_mean)?;
        let rhs: Vec<f64> = data.iter().zip(&prior).map(|(a, b)| a + b).collect();
        let mean = precision.solve_vec(&rhs)?;
        AnalyticPosterior::new(mean, cov)
    }
}

/// Geometry and physics of the nonlinear image problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    /// Image side length; parameters are `grid × grid`.
    pub grid: usize,
    /// Number of top rows that reach the observation.
    pub observed_rows: usize,
    pub noise_std: f64,
    /// `ν(x) = tanh(nonlinearity_scale · x)`.
    pub nonlinearity_scale: f64,
    /// Standard deviation of the 3×3 Gaussian blur kernel, in pixels.
    pub blur_sigma: f64,
    /// Range of the one-pixel border ("rim") values.
    pub rim_band: [f64; 2],
    /// Background interior value before blobs are added.
    pub interior: f64,
    pub blobs: usize,
    pub blob_amplitude: f64,
    /// Range of blob widths (Gaussian standard deviation, pixels).
    pub blob_width: [f64; 2],
    /// Per-pixel Gaussian texture added to the interior.
    pub texture_std: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            observed_rows: 6,
            noise_std: 0.05,
            nonlinearity_scale: 2.0,
            blur_sigma: 0.8,
            rim_band: [0.94, 0.96],
            interior: 0.5,
            blobs: 2,
            blob_amplitude: 0.3,
            blob_width: [4.0, 7.0],
            texture_std: 0.005,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("problem.toy: {m}")));
        if self.grid < 3 {
            return bad("grid must be at least 3");
        }
        if self.observed_rows == 0 || self.observed_rows > self.grid {
            return bad("observed_rows must lie in 1..=grid");
        }
        if !(self.noise_std > 0.0) || !(self.blur_sigma > 0.0) || !(self.nonlinearity_scale > 0.0) {
            return bad("noise_std, blur_sigma and nonlinearity_scale must be positive");
        }
        if !(self.rim_band[0] <= self.rim_band[1]) {
            return bad("rim_band must be [low, high]");
        }
        if !(self.blob_width[0] > 0.0 && self.blob_width[0] <= self.blob_width[1]) {
            return bad("blob_width must be [low, high] with low > 0");
        }
        if !(self.blob_amplitude >= 0.0) || !(self.texture_std >= 0.0) {
            return bad("blob_amplitude and texture_std must be non-negative");
        }
        Ok(())
    }
}

/// `y = M · B · ν(x) + ε`: pointwise `ν = tanh(κ·)`, 3×3 Gaussian blur `B`
/// with zero padding, and `M` keeping only the top `observed_rows` rows.
/// The bottom of the image never reaches the data, mimicking a receiver
/// array that only sees part of the domain.
#[derive(Debug, Clone)]
pub struct NonlinearToyProblem {
    config: ToyConfig,
    kernel: [[f64; 3]; 3],
    noise_cov: SpdMatrix,
}

impl NonlinearToyProblem {
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let mut kernel = [[0.0; 3]; 3];
        let mut total = 0.0;
        for (i, row) in kernel.iter_mut().enumerate() {
            for (j, k) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 1.0, j as f64 - 1.0);
                *k = (-(di * di + dj * dj) / (2.0 * config.blur_sigma * config.blur_sigma)).exp();
                total += *k;
            }
        }
        kernel.iter_mut().flatten().for_each(|k| *k /= total);
        let y_dim = config.observed_rows * config.grid;
        let noise_cov = SpdMatrix::scaled_identity(y_dim, config.noise_std * config.noise_std)?;
        Ok(Self {
            config,
            kernel,
            noise_cov,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn is_rim(&self, index: usize) -> bool {
        let g = self.config.grid;
        let (r, c) = (index / g, index % g);
        r == 0 || c == 0 || r == g - 1 || c == g - 1
    }

    fn activation(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = self.config.nonlinearity_scale;
        x.iter()
            .map(|&v| {
                let t = (k * v).tanh();
                (t, k * (1.0 - t * t))
            })
            .unzip()
    }

    /// Blur restricted to the observed rows: `M · B · u`.
    fn blur_observed(&self, u: &[f64]) -> Vec<f64> {
        let g = self.config.grid as isize;
        let rows = self.config.observed_rows as isize;
        let mut out = Vec::with_capacity((rows * g) as usize);
        for r in 0..rows {
            for c in 0..g {
                let mut s = 0.0;
                for (di, krow) in (-1..=1).zip(&self.kernel) {
                    for (dj, k) in (-1..=1).zip(krow) {
                        let (rr, cc) = (r + di, c + dj);
                        if rr >= 0 && rr < g && cc >= 0 && cc < g {
                            s += k * u[(rr * g + cc) as usize];
                        }
                    }
                }
                out.push(s);
            }
        }
        out
    }

    /// Adjoint of [`Self::blur_observed`]: `Bᵀ · Mᵀ · v`.
    fn blur_observed_t(&self, v: &[f64]) -> Vec<f64> {
        let g = self.config.grid as isize;
        let rows = self.config.observed_rows as isize;
        let mut out = vec![0.0; (g * g) as usize];
        for r in 0..rows {
            for c in 0..g {
                let val = v[(r * g + c) as usize];
                for (di, krow) in (-1..=1).zip(&self.kernel) {
                    for (dj, k) in (-1..=1).zip(krow) {
                        let (rr, cc) = (r + di, c + dj);
                        if rr >= 0 && rr < g && cc >= 0 && cc < g {
                            out[(rr * g + cc) as usize] += k * val;
                        }
                    }
                }
            }
        }
        out
    }

    /// Forward Jacobian-vector product `J(x) · u`.
    pub fn jacobian(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_len("parameter vector", x, self.x_dim())?;
        check_len("tangent vector", u, self.x_dim())?;
        let (_, dnu) = self.activation(x);
        let scaled: Vec<f64> = u.iter().zip(&dnu).map(|(a, b)| a * b).collect();
        Ok(self.blur_observed(&scaled))
    }
}

impl InverseProblem for NonlinearToyProblem {
    fn x_dim(&self) -> usize {
        self.config.grid * self.config.grid
    }

    fn y_dim(&self) -> usize {
        self.config.observed_rows * self.config.grid
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("parameter vector", x, self.x_dim())?;
        let (nu, _) = self.activation(x);
        Ok(self.blur_observed(&nu))
    }

    fn jacobian_t(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_len("parameter vector", x, self.x_dim())?;
        check_len("cotangent vector", v, self.y_dim())?;
        let (_, dnu) = self.activation(x);
        let back = self.blur_observed_t(v);
        Ok(back.iter().zip(&dnu).map(|(a, b)| a * b).collect())
    }

    fn noise(&self) -> &SpdMatrix {
        &self.noise_cov
    }

    /// Constant interior plus random Gaussian blobs and pixel texture,
    /// clipped below the rim band, inside a one-pixel rim whose values are
    /// drawn independently from `rim_band`.
    fn sample_prior(&self, rng: &mut Rng) -> Vec<f64> {
        let cfg = &self.config;
        let g = cfg.grid;
        let blobs: Vec<(f64, f64, f64, f64)> = (0..cfg.blobs)
            .map(|_| {
                let r = rng.uniform_range(1.0, (g - 2) as f64);
                let c = rng.uniform_range(1.0, (g - 2) as f64);
                let amp = rng.uniform_range(-cfg.blob_amplitude, cfg.blob_amplitude);
                let width = rng.uniform_range(cfg.blob_width[0], cfg.blob_width[1]);
                (r, c, amp, width)
            })
            .collect();
        let ceiling = cfg.rim_band[0] - 0.05;
        (0..g * g)
            .map(|idx| {
                if self.is_rim(idx) {
                    return rng.uniform_range(cfg.rim_band[0], cfg.rim_band[1]);
                }
                let (r, c) = ((idx / g) as f64, (idx % g) as f64);
                let base = cfg.interior + cfg.texture_std * rng.standard_normal();
                let v = blobs.iter().fold(base, |acc, &(br, bc, amp, w)| {
                    let d2 = (r - br).powi(2) + (c - bc).powi(2);
                    acc + amp * (-d2 / (2.0 * w * w)).exp()
                });
                v.clamp(0.0, ceiling)
            })
            .collect()
    }

    /// Rim at the centre of its band, constant interior.
    fn default_fiducial(&self) -> Vec<f64> {
        let rim = 0.5 * (self.config.rim_band[0] + self.config.rim_band[1]);
        (0..self.x_dim())
            .map(|i| if self.is_rim(i) { rim } else { self.config.interior })
            .collect()
    }

    fn value_range(&self) -> f64 {
        1.0
    }

    fn image_shape(&self) -> Option<(usize, usize)> {
        Some((self.config.grid, self.config.grid))
    }

    /// Rows inside the observation mask.
    fn observed_region(&self) -> Option<Vec<bool>> {
        let g = self.config.grid;
        Some((0..g * g).map(|i| i / g < self.config.observed_rows).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Linear,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearConfig {
    pub x_dim: usize,
    pub y_dim: usize,
    pub noise_std: f64,
    /// Condition number of the prior covariance.
    pub prior_condition: f64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            x_dim: 16,
            y_dim: 64,
            noise_std: 0.1,
            prior_condition: 10.0,
        }
    }
}

impl LinearConfig {
    pub fn validate(&self) -> Result<()> {
        if self.x_dim == 0 || self.y_dim == 0 {
            return Err(Error::InvalidArgument("problem.linear: dims must be positive".into()));
        }
        if !(self.noise_std > 0.0) || !(self.prior_condition >= 1.0) {
            return Err(Error::InvalidArgument(
                "problem.linear: noise_std must be positive and prior_condition >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Problem block of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    /// Seed for the problem instance itself (operator, prior covariance).
    pub seed: u64,
    pub linear: LinearConfig,
    pub toy: ToyConfig,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            kind: ProblemKind::Linear,
            seed: 2024,
            linear: LinearConfig::default(),
            toy: ToyConfig::default(),
        }
    }
}

/// Concrete problem selected by configuration.
#[derive(Debug, Clone)]
pub enum Problem {
    Linear(LinearGaussianProblem),
    Toy(NonlinearToyProblem),
}

impl Problem {
    pub fn from_config(config: &ProblemConfig) -> Result<Self> {
        Ok(match config.kind {
            ProblemKind::Linear => Problem::Linear(LinearGaussianProblem::replication(&config.linear, config.seed)?),
            ProblemKind::Toy => Problem::Toy(NonlinearToyProblem::new(config.toy.clone())?),
        })
    }

    fn inner(&self) -> &dyn InverseProblem {
        match self {
            Problem::Linear(p) => p,
            Problem::Toy(p) => p,
        }
    }
}

impl InverseProblem for Problem {
    fn x_dim(&self) -> usize {
        self.inner().x_dim()
    }
    fn y_dim(&self) -> usize {
        self.inner().y_dim()
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.inner().forward(x)
    }
    fn jacobian_t(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.inner().jacobian_t(x, v)
    }
    fn noise(&self) -> &SpdMatrix {
        self.inner().noise()
    }
    fn sample_prior(&self, rng: &mut Rng) -> Vec<f64> {
        self.inner().sample_prior(rng)
    }
    fn default_fiducial(&self) -> Vec<f64> {
        self.inner().default_fiducial()
    }
    fn value_range(&self) -> f64 {
        self.inner().value_range()
    }
    fn image_shape(&self) -> Option<(usize, usize)> {
        self.inner().image_shape()
    }
    fn observed_region(&self) -> Option<Vec<bool>> {
        self.inner().observed_region()
    }
    fn has_analytic_posterior(&self) -> bool {
        self.inner().has_analytic_posterior()
    }
    fn analytic_posterior(&self, y: &[f64]) -> Result<AnalyticPosterior> {
        self.inner().analytic_posterior(y)
    }
}
