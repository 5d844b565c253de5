//! Subcommand implementations. Each returns the paths it wrote.
//!
//! Output layout under `paths.out`:
//!
//! | command    | files |
//! |------------|-------|
//! | generate   | `dataset_stage0.bin`, `dataset_stage0.toml`, `config.toml` |
//! | train      | `bundle/` (manifest, checkpoints, normalization), `train_loss.csv`, `config.toml` |
//! | infer      | `samples.csv`, `mean.csv`, `std.csv`, `trajectory.csv`, `moments.csv` |
//! | evaluate   | `metrics_records.csv`, `metrics_summary.csv` |
//! | sweep      | `sweep.csv` |
//!
//! CSV files start with a `# config_hash: <hex>` comment line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use iterflow_core::eval::{evaluate_testset, moments_csv, records_csv, summary_csv, sweep_csv, sweep_training_size};
use iterflow_core::flow::{CouplingFlow, EpochRecord, TrainOutcome};
use iterflow_core::pipeline::{
    infer as run_infer, intermediate_trajectory, load_bundle, read_manifest, save_bundle, stage0_dataset,
    train_pipeline, write_stage_checkpoint, PipelineObserver, TrainedPipeline,
};
use iterflow_core::problems::{InverseProblem, Problem};
use iterflow_core::summary::{load_dataset, save_dataset, FiducialDataset};
use iterflow_core::Rng;
use log::{debug, info};
use serde::Serialize;

use crate::{CliError, RunConfig};

const STREAM_INFER: u64 = 0x434c_4931;
const STREAM_EVAL: u64 = 0x434c_4932;
const STREAM_SWEEP: u64 = 0x434c_4933;

pub const BUNDLE_DIR: &str = "bundle";
pub const DATASET_FILE: &str = "dataset_stage0.bin";

fn with_hash(hash: &str, body: &str) -> String {
    format!("# config_hash: {hash}\n{body}")
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
    fs::write(&path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.paths.out.clone();
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<PathBuf, CliError> {
    write(
        dir.join("config.toml"),
        format!("# config_hash: {}\n{}", cfg.hash(), cfg.canonical()),
    )
}

#[derive(Serialize)]
struct DatasetManifest {
    config_hash: String,
    seed: u64,
    stage: usize,
    records: usize,
    x_dim: usize,
    y_dim: usize,
}

/// Writes the stage-0 dataset `train` would start from.
pub fn generate(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let problem = Problem::from_config(&cfg.problem)?;
    let dir = out_dir(cfg)?;
    info!("generating {} records", cfg.train.n_train);
    let mut ds = stage0_dataset(&problem, cfg.train.n_train, &Rng::new(cfg.seed))?;
    ds.provenance = cfg.hash_bytes();
    let manifest = DatasetManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        stage: ds.stage(),
        records: ds.len(),
        x_dim: ds.x_dim(),
        y_dim: ds.y_dim(),
    };
    Ok(vec![
        write(dir.join(DATASET_FILE), save_dataset(&ds))?,
        write(
            dir.join("dataset_stage0.toml"),
            toml::to_string(&manifest).expect("serializable"),
        )?,
        write_config(cfg, &dir)?,
    ])
}

/// Persists checkpoints and the loss log as stages finish, so a failed
/// run keeps its completed stages.
struct TrainRecorder {
    bundle: PathBuf,
    loss_path: PathBuf,
    hash: String,
    rows: String,
}

impl TrainRecorder {
    fn flush(&mut self) -> iterflow_core::Result<()> {
        fs::write(&self.loss_path, with_hash(&self.hash, &self.rows))?;
        Ok(())
    }
}

impl PipelineObserver for TrainRecorder {
    fn dataset(&mut self, ds: &FiducialDataset) {
        info!("stage {}: {} records", ds.stage(), ds.len());
    }

    fn epoch(&mut self, stage: usize, r: &EpochRecord) {
        debug!(
            "stage {stage} epoch {}: train {:.6} val {:.6}",
            r.epoch, r.train_loss, r.val_loss
        );
        let _ = writeln!(
            self.rows,
            "{stage},{},{:?},{:?},{}",
            r.epoch, r.train_loss, r.val_loss, r.skipped_steps
        );
    }

    fn stage_trained(&mut self, stage: usize, flow: &CouplingFlow, outcome: &TrainOutcome) -> iterflow_core::Result<()> {
        info!(
            "stage {stage}: best epoch {} of {}, loss {:.6}",
            outcome.best_epoch,
            outcome.history.len(),
            outcome.best_loss
        );
        write_stage_checkpoint(&self.bundle, stage, flow)?;
        self.flush()
    }

    fn advanced(&mut self, stage: usize, flagged: &[usize]) {
        if !flagged.is_empty() {
            log::warn!("stage {stage}: {} records had non-finite updates and were kept", flagged.len());
        }
    }
}

pub const LOSS_HEADER: &str = "stage,epoch,train_loss,val_loss,skipped_steps\n";

/// Trains every stage and writes the bundle plus the per-epoch loss log.
pub fn train(cfg: &RunConfig) -> Result<TrainedPipeline, CliError> {
    let dir = out_dir(cfg)?;
    write_config(cfg, &dir)?;
    let mut rec = TrainRecorder {
        bundle: dir.join(BUNDLE_DIR),
        loss_path: dir.join("train_loss.csv"),
        hash: cfg.hash(),
        rows: LOSS_HEADER.to_string(),
    };
    let result = train_pipeline(
        &cfg.problem,
        &cfg.settings(),
        &cfg.flow,
        &cfg.train_config(),
        &Rng::new(cfg.seed),
        &mut rec,
    );
    // keep whatever was logged before a failure
    let _ = rec.flush();
    let mut pipe = result?;
    pipe.provenance.config_hash = cfg.hash();
    save_bundle(&dir.join(BUNDLE_DIR), &pipe)?;
    info!("bundle written to {}", dir.join(BUNDLE_DIR).display());
    Ok(pipe)
}

/// Where `infer` reads its observation from.
#[derive(Debug, Clone)]
pub enum ObservationSource {
    File(PathBuf),
    Record(PathBuf, usize),
}

fn read_observation(source: &ObservationSource) -> Result<Vec<f64>, CliError> {
    match source {
        ObservationSource::File(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Validation(format!("cannot read observation {}: {e}", p.display())))?;
            text.lines()
                .filter(|l| !l.trim_start().starts_with('#'))
                .flat_map(|l| l.split(|c: char| c == ',' || c.is_whitespace()))
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| CliError::Validation(format!("observation: `{t}` is not a number")))
                })
                .collect()
        }
        ObservationSource::Record(p, idx) => {
            let bytes = fs::read(p)
                .map_err(|e| CliError::Validation(format!("cannot read dataset {}: {e}", p.display())))?;
            let ds = load_dataset(&bytes)?;
            ds.records().get(*idx).map(|r| r.y.clone()).ok_or_else(|| {
                CliError::Validation(format!("record {idx} out of range ({} records)", ds.len()))
            })
        }
    }
}

fn vector_csv(hash: &str, name: &str, v: &[f64]) -> String {
    let mut s = format!("index,{name}\n");
    for (i, x) in v.iter().enumerate() {
        let _ = writeln!(s, "{i},{x:?}");
    }
    with_hash(hash, &s)
}

/// Posterior ensemble for one observation.
pub fn infer(cfg: &RunConfig, bundle: &Path, source: &ObservationSource, n_samples: usize) -> Result<Vec<PathBuf>, CliError> {
    if n_samples == 0 {
        return Err(CliError::Validation("--samples must be positive".into()));
    }
    let pipe = load_bundle(bundle)?;
    let y = read_observation(source)?;
    if y.len() != pipe.problem.y_dim() {
        return Err(CliError::Validation(format!(
            "observation has {} values but the bundle expects y_dim = {}",
            y.len(),
            pipe.problem.y_dim()
        )));
    }
    let dir = out_dir(cfg)?;
    let rng = Rng::new(cfg.seed).stream(&[STREAM_INFER]);
    let traj = intermediate_trajectory(&pipe, &y, &rng)?;
    let ens = run_infer(&pipe, &y, n_samples, &rng)?;
    let hash = &pipe.provenance.config_hash;

    let d = pipe.problem.x_dim();
    let mut samples = (0..d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    samples.push('\n');
    for i in 0..ens.samples.rows() {
        let row: Vec<String> = ens.samples.row(i).iter().map(|v| format!("{v:?}")).collect();
        samples.push_str(&row.join(","));
        samples.push('\n');
    }
    let mut trajectory = String::from("iteration,index,fiducial,summary\n");
    for (it, p) in traj.iter().enumerate() {
        for (j, (f, s)) in p.fiducial.iter().zip(&p.summary).enumerate() {
            let _ = writeln!(trajectory, "{it},{j},{f:?},{s:?}");
        }
    }
    info!("{} posterior samples written", ens.samples.rows());
    Ok(vec![
        write(dir.join("samples.csv"), with_hash(hash, &samples))?,
        write(dir.join("mean.csv"), vector_csv(hash, "mean", &ens.mean))?,
        write(dir.join("std.csv"), vector_csv(hash, "std", &ens.std))?,
        write(dir.join("trajectory.csv"), with_hash(hash, &trajectory))?,
        write(
            dir.join("moments.csv"),
            with_hash(hash, &moments_csv(&[(pipe.stages() + 1, &ens)])),
        )?,
    ])
}

/// Test-set metrics of a bundle under the configured problem.
pub fn evaluate(cfg: &RunConfig, bundle: &Path) -> Result<Vec<PathBuf>, CliError> {
    let manifest = read_manifest(bundle)?;
    let problem = Problem::from_config(&cfg.problem)?;
    if manifest.x_dim != problem.x_dim() || manifest.y_dim != problem.y_dim() {
        return Err(CliError::Validation(format!(
            "bundle was trained for x_dim = {}, y_dim = {} but the config describes x_dim = {}, y_dim = {}",
            manifest.x_dim,
            manifest.y_dim,
            problem.x_dim(),
            problem.y_dim()
        )));
    }
    if manifest.problem != cfg.problem {
        log::warn!("bundle problem configuration differs from the evaluation config");
    }
    let pipe = load_bundle(bundle)?;
    let dir = out_dir(cfg)?;
    info!("evaluating {} test observations", cfg.eval.n_test);
    let report = evaluate_testset(
        &pipe,
        &problem,
        &cfg.eval_options(),
        &Rng::new(cfg.seed).stream(&[STREAM_EVAL]),
    )?;
    for st in &report.stages {
        info!(
            "stage {}: point PSNR {:.3} dB{}",
            st.stage,
            st.point_psnr.mean,
            st.mean_err.map(|m| format!(", mean error {:.5}", m.mean)).unwrap_or_default()
        );
    }
    let hash = cfg.hash();
    Ok(vec![
        write(dir.join("metrics_records.csv"), with_hash(&hash, &records_csv(&report)))?,
        write(dir.join("metrics_summary.csv"), with_hash(&hash, &summary_csv(&report)))?,
    ])
}

/// Training-size sweep over `eval.sweep_sizes`.
pub fn sweep(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    if cfg.eval.sweep_sizes.is_empty() {
        return Err(CliError::Validation("eval.sweep_sizes is empty".into()));
    }
    let dir = out_dir(cfg)?;
    let entries = sweep_training_size(
        &cfg.problem,
        &cfg.eval.sweep_sizes,
        &cfg.settings(),
        &cfg.flow,
        &cfg.train_config(),
        &cfg.eval_options(),
        &Rng::new(cfg.seed).stream(&[STREAM_SWEEP]),
        |n| info!("sweep: n_train = {n}"),
    )?;
    Ok(vec![write(dir.join("sweep.csv"), with_hash(&cfg.hash(), &sweep_csv(&entries)))?])
}
