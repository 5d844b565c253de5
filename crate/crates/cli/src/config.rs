//! Run configuration file (TOML) and its canonical hash.

use std::path::{Path, PathBuf};

use iterflow_core::eval::EvalOptions;
use iterflow_core::flow::{FlowConfig, TrainConfig};
use iterflow_core::pipeline::PipelineSettings;
use iterflow_core::problems::ProblemConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub n_train: usize,
    /// Number of fiducial updates `L`; `L + 1` flows are trained.
    pub stages: usize,
    pub n_s_train: usize,
    pub n_s_infer: usize,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        let p = PipelineSettings::default();
        Self {
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            n_train: p.n_train,
            stages: p.stages,
            n_s_train: p.n_s_train,
            n_s_infer: p.n_s_infer,
        }
    }
}

pub const METRIC_NAMES: [&str; 4] = ["moments", "psnr", "ssim", "rmse"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBlock {
    pub n_test: usize,
    /// Posterior draws per stage and test observation.
    pub n_samples: usize,
    /// Any of `moments`, `psnr`, `ssim`, `rmse`. Only `ssim` changes what
    /// is computed; the rest are always cheap.
    pub metrics: Vec<String>,
    /// PSNR peak; the problem's value range when absent.
    pub psnr_range: Option<f64>,
    pub sweep_sizes: Vec<usize>,
}

impl Default for EvalBlock {
    fn default() -> Self {
        let e = EvalOptions::default();
        Self {
            n_test: e.n_test,
            n_samples: e.n_samples,
            metrics: METRIC_NAMES.iter().map(|s| s.to_string()).collect(),
            psnr_range: None,
            sweep_sizes: vec![400, 1000, 2000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsBlock {
    pub out: PathBuf,
}

impl Default for PathsBlock {
    fn default() -> Self {
        Self { out: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; all available cores when absent. Results do not
    /// depend on it.
    pub threads: Option<usize>,
    pub problem: ProblemConfig,
    pub flow: FlowConfig,
    pub train: TrainBlock,
    pub eval: EvalBlock,
    pub paths: PathsBlock,
}


/// The parts of [`RunConfig`] that determine results.
#[derive(Serialize)]
struct Hashed<'a> {
    seed: u64,
    problem: &'a ProblemConfig,
    flow: &'a FlowConfig,
    train: &'a TrainBlock,
    eval: &'a EvalBlock,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Field-level checks; runs before any file is touched.
    pub fn validate(&self) -> Result<(), CliError> {
        let v = |r: iterflow_core::Result<()>| r.map_err(|e| CliError::Validation(e.to_string()));
        let t = &self.train;
        let positive = [
            ("train.batch_size", t.batch_size),
            ("train.max_epochs", t.max_epochs),
            ("train.patience", t.patience),
            ("train.n_train", t.n_train),
            ("train.n_s_train", t.n_s_train),
            ("train.n_s_infer", t.n_s_infer),
            ("eval.n_test", self.eval.n_test),
            ("eval.n_samples", self.eval.n_samples),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(CliError::Validation(format!("{name} must be positive")));
            }
        }
        if self.threads == Some(0) {
            return Err(CliError::Validation("threads must be positive".into()));
        }
        if let Some(r) = self.eval.psnr_range {
            if !(r > 0.0) {
                return Err(CliError::Validation("eval.psnr_range must be positive".into()));
            }
        }
        for m in &self.eval.metrics {
            if !METRIC_NAMES.contains(&m.as_str()) {
                return Err(CliError::Validation(format!(
                    "eval.metrics: unknown metric `{m}` (expected one of {})",
                    METRIC_NAMES.join(", ")
                )));
            }
        }
        if self.eval.sweep_sizes.contains(&0) {
            return Err(CliError::Validation("eval.sweep_sizes entries must be positive".into()));
        }
        v(self.flow.validate())?;
        v(self.train_config().validate())?;
        v(self.problem.linear.validate())?;
        v(self.problem.toy.validate())?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
        }
    }

    pub fn settings(&self) -> PipelineSettings {
        PipelineSettings {
            n_train: self.train.n_train,
            stages: self.train.stages,
            n_s_train: self.train.n_s_train,
            n_s_infer: self.train.n_s_infer,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            n_test: self.eval.n_test,
            n_samples: self.eval.n_samples,
            psnr_range: self.eval.psnr_range,
            compute_ssim: self.eval.metrics.iter().any(|m| m == "ssim"),
        }
    }

    /// Canonical TOML of every result-determining field (everything but
    /// `threads` and `paths`).
    pub fn canonical(&self) -> String {
        toml::to_string(&Hashed {
            seed: self.seed,
            problem: &self.problem,
            flow: &self.flow,
            train: &self.train,
            eval: &self.eval,
        })
        .expect("config is always serializable")
    }

    pub fn hash_bytes(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    /// Lower-case hex SHA-256 of [`Self::canonical`].
    pub fn hash(&self) -> String {
        hex::encode(self.hash_bytes())
    }
}
