//! Stage-wise training of a chain of conditional flows and the matching
//! refinement loop at inference time.
//!
//! Indexing convention: a pipeline with `L` refinement steps holds `L + 1`
//! flows. Training fits flow `j` on the stage-`j` dataset for `j = 0..=L`,
//! advancing the dataset after every flow but the last. Inference performs
//! `L` fiducial updates with flows `0..L` and draws the posterior from flow
//! `L` around the final fiducial.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    load_checkpoint_expecting, posterior_mean_estimate, sample, save_checkpoint, train_flow, CouplingFlow,
    EpochRecord, FlowConfig, Normalization, TrainConfig, TrainOutcome,
};
use crate::numerics::{sample_moments, Rng, Tensor};
use crate::problems::{InverseProblem, Problem, ProblemConfig};
use crate::summary::{advance_stage, build_stage0, FiducialDataset, Split};

const STREAM_DATA: u64 = 0x4441_5441;
const STREAM_INIT: u64 = 0x494e_4954;
const STREAM_SHUFFLE: u64 = 0x5348_5546;
const STREAM_ADVANCE: u64 = 0x4144_5643;
const STREAM_REFINE: u64 = 0x5245_464e;
const STREAM_SAMPLES: u64 = 0x5341_4d50;

/// Refinement hyper-parameters not owned by the flow or its optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub n_train: usize,
    /// Number of fiducial updates `L`.
    pub stages: usize,
    /// Flow draws per posterior-mean estimate while advancing datasets.
    pub n_s_train: usize,
    /// Flow draws per posterior-mean estimate at inference.
    pub n_s_infer: usize,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            n_train: 1000,
            stages: 3,
            n_s_train: 64,
            n_s_infer: 256,
        }
    }
}

impl PipelineSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_s_train == 0 || self.n_s_infer == 0 {
            return Err(Error::InvalidArgument(
                "n_train, n_s_train and n_s_infer must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Hooks for progress reporting and for persisting partial results.
pub trait PipelineObserver {
    fn dataset(&mut self, _ds: &FiducialDataset) {}
    fn epoch(&mut self, _stage: usize, _record: &EpochRecord) {}
    fn stage_trained(&mut self, _stage: usize, _flow: &CouplingFlow, _outcome: &TrainOutcome) -> Result<()> {
        Ok(())
    }
    fn advanced(&mut self, _stage: usize, _flagged: &[usize]) {}
}

impl PipelineObserver for () {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

/// Trained chain of per-stage flows for one problem.
#[derive(Debug, Clone)]
pub struct TrainedPipeline {
    pub problem_config: ProblemConfig,
    pub problem: Problem,
    pub flows: Vec<CouplingFlow>,
    pub n_s_infer: usize,
    pub provenance: Provenance,
}

impl TrainedPipeline {
    /// Number of fiducial updates `L`.
    pub fn stages(&self) -> usize {
        self.flows.len() - 1
    }
}

/// The stage-0 dataset [`train_pipeline`] starts from under `rng`.
pub fn stage0_dataset(problem: &Problem, n_train: usize, rng: &Rng) -> Result<FiducialDataset> {
    build_stage0(problem, n_train, &rng.stream(&[STREAM_DATA]))
}

/// Fits flows `0..=L`, advancing the dataset between stages.
///
/// A stage whose optimizer never produces a finite step aborts the run with
/// [`Error::Diverged`]; stages completed before it have already been handed
/// to the observer.
pub fn train_pipeline(
    problem_config: &ProblemConfig,
    settings: &PipelineSettings,
    flow_config: &FlowConfig,
    train_config: &TrainConfig,
    rng: &Rng,
    observer: &mut dyn PipelineObserver,
) -> Result<TrainedPipeline> {
    settings.validate()?;
    flow_config.validate()?;
    train_config.validate()?;
    let problem = Problem::from_config(problem_config)?;
    let d = problem.x_dim();
    let mut ds = stage0_dataset(&problem, settings.n_train, rng)?;
    let mut flows = Vec::with_capacity(settings.stages + 1);
    for stage in 0..=settings.stages {
        observer.dataset(&ds);
        let (tx, tc) = ds
            .pairs(Split::Train)
            .ok_or_else(|| Error::InvalidArgument("no training records".into()))?;
        let val = ds.pairs(Split::Validation);
        let mut flow = CouplingFlow::new(d, d, flow_config, &mut rng.stream(&[STREAM_INIT, stage as u64]))?;
        flow.set_normalization(Some(Normalization::fit(&tx, &tc)))?;
        let outcome = train_flow(
            &mut flow,
            (&tx, &tc),
            val.as_ref().map(|(x, c)| (x, c)),
            train_config,
            &mut rng.stream(&[STREAM_SHUFFLE, stage as u64]),
            |rec| observer.epoch(stage, rec),
        )
        .map_err(|e| match e {
            Error::NonFinite(detail) => Error::Diverged { stage, detail },
            other => other,
        })?;
        observer.stage_trained(stage, &flow, &outcome)?;
        if stage < settings.stages {
            let adv = advance_stage(&ds, &flow, &problem, settings.n_s_train, &rng.stream(&[STREAM_ADVANCE]))?;
            observer.advanced(stage, &adv.flagged);
            ds = adv.dataset;
        }
        flows.push(flow);
    }
    Ok(TrainedPipeline {
        problem_config: problem_config.clone(),
        problem,
        flows,
        n_s_infer: settings.n_s_infer,
        provenance: Provenance {
            seed: rng.seed(),
            config_hash: String::new(),
        },
    })
}

/// `(x_i, ȳ_i)` at one refinement step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub fiducial: Vec<f64>,
    pub summary: Vec<f64>,
}

/// Refinement loop of inference, returning `L + 1` points `(x_i, ȳ_i)`.
pub fn intermediate_trajectory(pipeline: &TrainedPipeline, y: &[f64], rng: &Rng) -> Result<Vec<TrajectoryPoint>> {
    let problem = &pipeline.problem;
    if y.len() != problem.y_dim() {
        return Err(Error::DimMismatch {
            what: "observation",
            expected: problem.y_dim(),
            actual: y.len(),
        });
    }
    let mut x = problem.default_fiducial();
    let mut out = Vec::with_capacity(pipeline.flows.len());
    for (i, flow) in pipeline.flows.iter().enumerate() {
        let summary = problem.score(&x, y)?;
        if i == pipeline.stages() {
            out.push(TrajectoryPoint { fiducial: x, summary });
            break;
        }
        let step = posterior_mean_estimate(flow, &summary, pipeline.n_s_infer, &mut rng.stream(&[STREAM_REFINE, i as u64]))
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteFiducial { iteration: i },
                other => other,
            })?;
        let next: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + b).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFiducial { iteration: i });
        }
        out.push(TrajectoryPoint { fiducial: x, summary });
        x = next;
    }
    Ok(out)
}

/// Posterior draws `x_L + Δx` with summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEnsemble {
    /// `n × x_dim`, fiducial already added.
    pub samples: Tensor,
    pub fiducial: Vec<f64>,
    pub mean: Vec<f64>,
    /// Unbiased (`n − 1`) sample covariance.
    pub covariance: Tensor,
    pub std: Vec<f64>,
}

impl PosteriorEnsemble {
    /// Builds the ensemble from flow draws `Δx` around `fiducial`.
    pub fn from_draws(fiducial: Vec<f64>, mut draws: Tensor) -> Self {
        for i in 0..draws.rows() {
            for (v, f) in draws.row_mut(i).iter_mut().zip(&fiducial) {
                *v += f;
            }
        }
        let (mean, covariance) = sample_moments(&draws);
        let std = (0..covariance.rows()).map(|i| covariance.at(i, i).max(0.0).sqrt()).collect();
        Self {
            samples: draws,
            fiducial,
            mean,
            covariance,
            std,
        }
    }

    /// Covariance by streaming accumulation of centred outer products; an
    /// independent route to `self.covariance`.
    pub fn covariance_accumulated(&self) -> Tensor {
        let (n, d) = (self.samples.rows(), self.samples.cols());
        let mut acc = Tensor::zeros(&[d, d]);
        let mut mean = vec![0.0; d];
        // Welford update
        for k in 0..n {
            let row = self.samples.row(k);
            let delta: Vec<f64> = row.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for (m, dl) in mean.iter_mut().zip(&delta) {
                *m += dl / (k + 1) as f64;
            }
            for i in 0..d {
                let after_i = row[i] - mean[i];
                for j in 0..d {
                    let cur = acc.at(i, j);
                    acc.set(i, j, cur + delta[j] * after_i);
                }
            }
        }
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        Tensor::from_fn(d, d, |i, j| 0.5 * (acc.at(i, j) + acc.at(j, i)) / denom)
    }
}

fn stage_ensemble(
    pipeline: &TrainedPipeline,
    stage: usize,
    point: &TrajectoryPoint,
    n_samples: usize,
    rng: &Rng,
) -> Result<PosteriorEnsemble> {
    let draws = sample(
        &pipeline.flows[stage],
        &point.summary,
        n_samples,
        &mut rng.stream(&[STREAM_SAMPLES, stage as u64]),
    )?;
    Ok(PosteriorEnsemble::from_draws(point.fiducial.clone(), draws))
}

/// Full inference: `L` refinement steps, then `n_samples` draws from the
/// last flow around `x_L`.
pub fn infer(pipeline: &TrainedPipeline, y: &[f64], n_samples: usize, rng: &Rng) -> Result<PosteriorEnsemble> {
    let traj = intermediate_trajectory(pipeline, y, rng)?;
    let last = traj.last().expect("at least one flow");
    stage_ensemble(pipeline, pipeline.stages(), last, n_samples, rng)
}

/// Per-stage view used for diagnostics: the ensemble each flow would
/// produce around its own fiducial.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub point: TrajectoryPoint,
    pub ensemble: PosteriorEnsemble,
}

/// Ensembles for every stage `0..=L`. The last entry coincides bitwise with
/// [`infer`] under the same seed.
pub fn infer_all_stages(pipeline: &TrainedPipeline, y: &[f64], n_samples: usize, rng: &Rng) -> Result<Vec<StageOutput>> {
    let traj = intermediate_trajectory(pipeline, y, rng)?;
    traj.into_iter()
        .enumerate()
        .map(|(i, point)| {
            let ensemble = stage_ensemble(pipeline, i, &point, n_samples, rng)?;
            Ok(StageOutput { point, ensemble })
        })
        .collect()
}

pub const BUNDLE_VERSION: u32 = 1;

/// `manifest.toml` of a pipeline bundle directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub stages: usize,
    pub x_dim: usize,
    pub y_dim: usize,
    pub n_s_infer: usize,
    pub checkpoints: Vec<String>,
    pub problem: ProblemConfig,
}

fn checkpoint_name(stage: usize) -> String {
    format!("stage_{stage}.ckpt")
}

const NORMALIZATION_FILE: &str = "normalization.csv";

fn normalization_rows(stage: usize, norm: &Normalization, out: &mut String) {
    use std::fmt::Write;
    for (field, values) in [
        ("x_mean", &norm.x_mean),
        ("x_scale", &norm.x_scale),
        ("c_mean", &norm.c_mean),
        ("c_scale", &norm.c_scale),
    ] {
        for (i, v) in values.iter().enumerate() {
            // `{:?}` on f64 prints the shortest round-trip representation
            let _ = writeln!(out, "{stage},{field},{i},{v:?}");
        }
    }
}

/// Writes one checkpoint file; used both for whole bundles and to persist
/// stages as they finish.
pub fn write_stage_checkpoint(dir: &Path, stage: usize, flow: &CouplingFlow) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(checkpoint_name(stage)), save_checkpoint(flow))?;
    Ok(())
}

/// Writes `manifest.toml`, `stage_<i>.ckpt` and `normalization.csv`.
pub fn save_bundle(dir: &Path, pipeline: &TrainedPipeline) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut norm_csv = String::from("stage,field,index,value\n");
    let mut names = Vec::new();
    for (i, flow) in pipeline.flows.iter().enumerate() {
        write_stage_checkpoint(dir, i, flow)?;
        names.push(checkpoint_name(i));
        if let Some(n) = flow.normalization() {
            normalization_rows(i, n, &mut norm_csv);
        }
    }
    fs::write(dir.join(NORMALIZATION_FILE), norm_csv)?;
    let manifest = BundleManifest {
        format_version: BUNDLE_VERSION,
        config_hash: pipeline.provenance.config_hash.clone(),
        seed: pipeline.provenance.seed,
        stages: pipeline.stages(),
        x_dim: pipeline.problem.x_dim(),
        y_dim: pipeline.problem.y_dim(),
        n_s_infer: pipeline.n_s_infer,
        checkpoints: names,
        problem: pipeline.problem_config.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::format("manifest", e.to_string()))?;
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<BundleManifest> {
    let text = fs::read_to_string(dir.join("manifest.toml"))?;
    let manifest: BundleManifest = toml::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    if manifest.format_version != BUNDLE_VERSION {
        return Err(Error::Version {
            kind: "bundle",
            found: manifest.format_version,
            expected: BUNDLE_VERSION,
        });
    }
    if manifest.checkpoints.len() != manifest.stages + 1 {
        return Err(Error::format(
            "manifest",
            format!("{} checkpoints for {} stages", manifest.checkpoints.len(), manifest.stages),
        ));
    }
    Ok(manifest)
}

pub fn load_bundle(dir: &Path) -> Result<TrainedPipeline> {
    let manifest = read_manifest(dir)?;
    let problem = Problem::from_config(&manifest.problem)?;
    if problem.x_dim() != manifest.x_dim {
        return Err(Error::DimMismatch {
            what: "bundle x_dim",
            expected: problem.x_dim(),
            actual: manifest.x_dim,
        });
    }
    if problem.y_dim() != manifest.y_dim {
        return Err(Error::DimMismatch {
            what: "bundle y_dim",
            expected: problem.y_dim(),
            actual: manifest.y_dim,
        });
    }
    let flows = manifest
        .checkpoints
        .iter()
        .map(|name| load_checkpoint_expecting(&fs::read(dir.join(name))?, manifest.x_dim, manifest.x_dim))
        .collect::<Result<Vec<_>>>()?;
    let mut expected = String::from("stage,field,index,value\n");
    for (i, flow) in flows.iter().enumerate() {
        if let Some(n) = flow.normalization() {
            normalization_rows(i, n, &mut expected);
        }
    }
    if fs::read_to_string(dir.join(NORMALIZATION_FILE))? != expected {
        return Err(Error::format("bundle", "normalization file disagrees with checkpoints"));
    }
    Ok(TrainedPipeline {
        problem_config: manifest.problem,
        problem,
        flows,
        n_s_infer: manifest.n_s_infer,
        provenance: Provenance {
            seed: manifest.seed,
            config_hash: manifest.config_hash,
        },
    })
}
