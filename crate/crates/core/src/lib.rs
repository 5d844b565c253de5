//! Iterative amortized posterior refinement for Bayesian inverse problems.
//!
//! A chain of conditional coupling flows is trained on pairs of parameter
//! residuals `Δx = x − x_i` and score summaries `ȳ_i = ∇ log p(y | x_i)`.
//! Each stage moves the fiducial `x_i` by the posterior mean of its flow, so
//! later stages see more informative summaries.
//!
//! Modules, bottom-up:
//! - [`numerics`]: tensors, Cholesky, seeded RNG, Gaussian sampling
//! - [`problems`]: the inverse-problem interface and concrete problems
//! - [`flow`]: the coupling flow, its training and sampling
//! - [`summary`]: per-stage `(Δx, ȳ)` datasets
//! - [`pipeline`]: multi-stage training and inference
//! - [`eval`]: metrics, test-set evaluation, training-size sweeps

mod codec;
pub mod error;
pub mod eval;
pub mod flow;
pub mod numerics;
pub mod pipeline;
pub mod problems;
pub mod summary;

pub use error::{Error, Result};
pub use flow::{CouplingFlow, FlowConfig, Normalization, TrainConfig};
pub use numerics::{Rng, SpdMatrix, Tensor};
pub use pipeline::{PipelineSettings, PosteriorEnsemble, TrainedPipeline};
pub use problems::{AnalyticPosterior, InverseProblem, LinearGaussianProblem, NonlinearToyProblem, Problem, ProblemConfig};
pub use summary::FiducialDataset;
