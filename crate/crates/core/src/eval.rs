//! Posterior-quality metrics: moment errors against the analytic oracle,
//! PSNR/SSIM/RMSE of point estimates, test-set evaluation and the
//! training-size sweep.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, TrainConfig};
use crate::numerics::{norm, Rng, Tensor};
use crate::pipeline::{infer_all_stages, train_pipeline, PipelineSettings, PosteriorEnsemble, TrainedPipeline};
use crate::problems::{AnalyticPosterior, InverseProblem, ProblemConfig};

const STREAM_TEST_PRIOR: u64 = 0x5445_5350;
const STREAM_TEST_NOISE: u64 = 0x5445_534e;
const STREAM_TEST_INFER: u64 = 0x5445_5349;

/// `(‖mean − m‖₂, ‖cov − C‖_F)`.
pub fn moment_errors(ens: &PosteriorEnsemble, oracle: &AnalyticPosterior) -> Result<(f64, f64)> {
    if ens.mean.len() != oracle.mean.len() {
        return Err(Error::DimMismatch {
            what: "ensemble dimension",
            expected: oracle.mean.len(),
            actual: ens.mean.len(),
        });
    }
    let diff: Vec<f64> = ens.mean.iter().zip(&oracle.mean).map(|(a, b)| a - b).collect();
    let cov_err = ens.covariance.sub(&oracle.covariance)?.frobenius_norm();
    Ok((norm(&diff), cov_err))
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(
            "image metric",
            format!("lengths {} and {} (must match and be non-empty)", a.len(), b.len()),
        ));
    }
    Ok(())
}

pub fn rmse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    check_same_len(estimate, truth)?;
    let mse = estimate.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / estimate.len() as f64;
    Ok(mse.sqrt())
}

/// `20·log10(range) − 20·log10(RMSE)`; `+∞` for an exact match.
pub fn psnr(estimate: &[f64], truth: &[f64], range: f64) -> Result<f64> {
    if !(range > 0.0) {
        return Err(Error::InvalidArgument("PSNR range must be positive".into()));
    }
    let e = rmse(estimate, truth)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * range.log10() - 20.0 * e.log10())
}

/// SSIM window and stabilizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub range: f64,
}

impl Default for SsimParams {
    /// 11-tap Gaussian window with σ = 1.5, K₁ = 0.01, K₂ = 0.03.
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering of a `rows × cols` image.
fn filter_valid(img: &[f64], rows: usize, cols: usize, w: &[f64]) -> Vec<f64> {
    let k = w.len();
    let (orows, ocols) = (rows - k + 1, cols - k + 1);
    let mut horiz = vec![0.0; rows * ocols];
    for r in 0..rows {
        for c in 0..ocols {
            horiz[r * ocols + c] = (0..k).map(|t| w[t] * img[r * cols + c + t]).sum();
        }
    }
    let mut out = vec![0.0; orows * ocols];
    for r in 0..orows {
        for c in 0..ocols {
            out[r * ocols + c] = (0..k).map(|t| w[t] * horiz[(r + t) * ocols + c]).sum();
        }
    }
    out
}

/// Mean structural similarity over all fully contained windows.
pub fn ssim(estimate: &[f64], truth: &[f64], shape: (usize, usize), params: &SsimParams) -> Result<f64> {
    check_same_len(estimate, truth)?;
    let (rows, cols) = shape;
    if rows * cols != estimate.len() {
        return Err(Error::shape(
            "ssim",
            format!("{} values do not form a {rows}×{cols} image", estimate.len()),
        ));
    }
    if rows < params.window || cols < params.window {
        return Err(Error::shape(
            "ssim",
            format!("{rows}×{cols} image is smaller than the {0}×{0} window", params.window),
        ));
    }
    let w = gaussian_window(params.window, params.sigma);
    let c1 = (params.k1 * params.range).powi(2);
    let c2 = (params.k2 * params.range).powi(2);
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x * y).collect() };
    let mu_x = filter_valid(estimate, rows, cols, &w);
    let mu_y = filter_valid(truth, rows, cols, &w);
    let xx = filter_valid(&prod(estimate, estimate), rows, cols, &w);
    let yy = filter_valid(&prod(truth, truth), rows, cols, &w);
    let xy = filter_valid(&prod(estimate, truth), rows, cols, &w);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sxx = xx[i] - mx * mx;
            let syy = yy[i] - my * my;
            let sxy = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Image metrics for one estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub rmse: f64,
    pub ssim: Option<f64>,
}

/// Metrics for one test observation at one stage. `stage` is 1-based: stage
/// `s` is the output of flow `s − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub observation: usize,
    pub stage: usize,
    pub mean_err: Option<f64>,
    pub cov_err: Option<f64>,
    /// Point estimate: the next fiducial `x_s` (the ensemble mean at the
    /// last stage, which has no successor).
    pub point: ImageMetrics,
    /// Mean of the stage's own posterior ensemble.
    pub ensemble_mean: ImageMetrics,
    pub mean_std: f64,
    pub std_observed: Option<f64>,
    pub std_unobserved: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    fn of(values: impl Iterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

/// Aggregate over the test set for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: usize,
    pub mean_err: Option<Summary>,
    pub cov_err: Option<Summary>,
    pub point_psnr: Summary,
    pub point_rmse: Summary,
    pub point_ssim: Option<Summary>,
    pub ensemble_psnr: Summary,
    pub ensemble_rmse: Summary,
    pub ensemble_ssim: Option<Summary>,
    pub std_observed: Option<Summary>,
    pub std_unobserved: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
    pub stages: Vec<StageSummary>,
}

/// Options for [`evaluate_testset`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub n_test: usize,
    /// Posterior draws per stage and observation.
    pub n_samples: usize,
    /// PSNR peak; the problem's configured range when `None`.
    pub psnr_range: Option<f64>,
    pub compute_ssim: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_test: 50,
            n_samples: 2000,
            psnr_range: None,
            compute_ssim: true,
        }
    }
}

fn image_metrics(
    est: &[f64],
    truth: &[f64],
    range: f64,
    shape: Option<(usize, usize)>,
    compute_ssim: bool,
) -> Result<ImageMetrics> {
    let ssim = match (compute_ssim, shape) {
        (true, Some(s)) if s.0 >= SsimParams::default().window && s.1 >= SsimParams::default().window => Some(ssim(
            est,
            truth,
            s,
            &SsimParams {
                range,
                ..Default::default()
            },
        )?),
        _ => None,
    };
    Ok(ImageMetrics {
        psnr: psnr(est, truth, range)?,
        rmse: rmse(est, truth)?,
        ssim,
    })
}

fn region_mean(values: &[f64], mask: &[bool], want: bool) -> Option<f64> {
    let sel: Vec<f64> = values.iter().zip(mask).filter(|(_, &m)| m == want).map(|(v, _)| *v).collect();
    (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
}

/// Evaluates every stage of `pipeline` on `n_test` fresh draws from the
/// joint distribution of `problem`.
pub fn evaluate_testset(
    pipeline: &TrainedPipeline,
    problem: &dyn InverseProblem,
    options: &EvalOptions,
    rng: &Rng,
) -> Result<MetricReport> {
    if options.n_test == 0 || options.n_samples == 0 {
        return Err(Error::InvalidArgument("n_test and n_samples must be positive".into()));
    }
    if problem.x_dim() != pipeline.problem.x_dim() || problem.y_dim() != pipeline.problem.y_dim() {
        return Err(Error::DimMismatch {
            what: "evaluation problem x_dim",
            expected: pipeline.problem.x_dim(),
            actual: problem.x_dim(),
        });
    }
    let range = options.psnr_range.unwrap_or_else(|| problem.value_range());
    let shape = problem.image_shape();
    let observed = problem.observed_region();
    let per_obs = (0..options.n_test)
        .into_par_iter()
        .map(|t| -> Result<Vec<MetricRecord>> {
            let x = problem.sample_prior(&mut rng.stream(&[STREAM_TEST_PRIOR, t as u64]));
            let y = problem.simulate(&x, &mut rng.stream(&[STREAM_TEST_NOISE, t as u64]))?;
            let oracle = if problem.has_analytic_posterior() {
                Some(problem.analytic_posterior(&y)?)
            } else {
                None
            };
            let outputs = infer_all_stages(pipeline, &y, options.n_samples, &rng.stream(&[STREAM_TEST_INFER, t as u64]))?;
            let mut recs = Vec::with_capacity(outputs.len());
            for (i, out) in outputs.iter().enumerate() {
                let ens = &out.ensemble;
                let point = outputs.get(i + 1).map_or(&ens.mean, |next| &next.point.fiducial);
                let (mean_err, cov_err) = match &oracle {
                    Some(o) => {
                        let (m, c) = moment_errors(ens, o)?;
                        (Some(m), Some(c))
                    }
                    None => (None, None),
                };
                recs.push(MetricRecord {
                    observation: t,
                    stage: i + 1,
                    mean_err,
                    cov_err,
                    point: image_metrics(point, &x, range, shape, options.compute_ssim)?,
                    ensemble_mean: image_metrics(&ens.mean, &x, range, shape, options.compute_ssim)?,
                    mean_std: ens.std.iter().sum::<f64>() / ens.std.len() as f64,
                    std_observed: observed.as_ref().and_then(|m| region_mean(&ens.std, m, true)),
                    std_unobserved: observed.as_ref().and_then(|m| region_mean(&ens.std, m, false)),
                });
            }
            Ok(recs)
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<MetricRecord> = per_obs.into_iter().flatten().collect();
    Ok(MetricReport {
        stages: summarize(&records, pipeline.flows.len()),
        records,
    })
}

fn summarize(records: &[MetricRecord], n_stages: usize) -> Vec<StageSummary> {
    (1..=n_stages)
        .map(|stage| {
            let rs: Vec<&MetricRecord> = records.iter().filter(|r| r.stage == stage).collect();
            let opt = |f: &dyn Fn(&MetricRecord) -> Option<f64>| Summary::of(rs.iter().filter_map(|r| f(r)));
            let req = |f: &dyn Fn(&MetricRecord) -> f64| Summary::of(rs.iter().map(|r| f(r))).expect("records per stage");
            StageSummary {
                stage,
                mean_err: opt(&|r| r.mean_err),
                cov_err: opt(&|r| r.cov_err),
                point_psnr: req(&|r| r.point.psnr),
                point_rmse: req(&|r| r.point.rmse),
                point_ssim: opt(&|r| r.point.ssim),
                ensemble_psnr: req(&|r| r.ensemble_mean.psnr),
                ensemble_rmse: req(&|r| r.ensemble_mean.rmse),
                ensemble_ssim: opt(&|r| r.ensemble_mean.ssim),
                std_observed: opt(&|r| r.std_observed),
                std_unobserved: opt(&|r| r.std_unobserved),
            }
        })
        .collect()
}

/// Report for one training-set size.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub n_train: usize,
    pub report: MetricReport,
}

/// Trains and evaluates one pipeline per training-set size. All sizes share
/// the same test observations.
#[allow(clippy::too_many_arguments)]
pub fn sweep_training_size(
    problem_config: &ProblemConfig,
    sizes: &[usize],
    settings: &PipelineSettings,
    flow_config: &FlowConfig,
    train_config: &TrainConfig,
    options: &EvalOptions,
    rng: &Rng,
    mut progress: impl FnMut(usize),
) -> Result<Vec<SweepEntry>> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one training size".into()));
    }
    let problem = crate::problems::Problem::from_config(problem_config)?;
    sizes
        .iter()
        .map(|&n_train| {
            progress(n_train);
            let s = PipelineSettings {
                n_train,
                ..settings.clone()
            };
            let pipe = train_pipeline(problem_config, &s, flow_config, train_config, &rng.stream(&[n_train as u64]), &mut ())?;
            let report = evaluate_testset(&pipe, &problem, options, &rng.stream(&[u64::MAX]))?;
            Ok(SweepEntry { n_train, report })
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Per-record CSV.
///
/// Header: `observation,stage,mean_err,cov_err,point_psnr,point_ssim,
/// point_rmse,ensemble_psnr,ensemble_ssim,ensemble_rmse,mean_std,
/// std_observed,std_unobserved`. Missing metrics are empty cells.
pub fn records_csv(report: &MetricReport) -> String {
    let mut s = String::from(
        "observation,stage,mean_err,cov_err,point_psnr,point_ssim,point_rmse,ensemble_psnr,ensemble_ssim,ensemble_rmse,mean_std,std_observed,std_unobserved\n",
    );
    for r in &report.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{:?},{},{:?},{:?},{},{:?},{:?},{},{}",
            r.observation,
            r.stage,
            cell(r.mean_err),
            cell(r.cov_err),
            r.point.psnr,
            cell(r.point.ssim),
            r.point.rmse,
            r.ensemble_mean.psnr,
            cell(r.ensemble_mean.ssim),
            r.ensemble_mean.rmse,
            r.mean_std,
            cell(r.std_observed),
            cell(r.std_unobserved),
        );
    }
    s
}

const SUMMARY_METRICS: [&str; 10] = [
    "mean_err",
    "cov_err",
    "point_psnr",
    "point_ssim",
    "point_rmse",
    "ensemble_psnr",
    "ensemble_ssim",
    "ensemble_rmse",
    "std_observed",
    "std_unobserved",
];

fn summary_cells(st: &StageSummary) -> [Option<Summary>; 10] {
    [
        st.mean_err,
        st.cov_err,
        Some(st.point_psnr),
        st.point_ssim,
        Some(st.point_rmse),
        Some(st.ensemble_psnr),
        st.ensemble_ssim,
        Some(st.ensemble_rmse),
        st.std_observed,
        st.std_unobserved,
    ]
}

fn summary_header(prefix: &str) -> String {
    let mut h = String::from(prefix);
    for m in SUMMARY_METRICS {
        let _ = write!(h, ",{m}_mean,{m}_std");
    }
    h.push('\n');
    h
}

fn summary_row(out: &mut String, lead: &str, st: &StageSummary) {
    out.push_str(lead);
    for c in summary_cells(st) {
        let _ = write!(out, ",{},{}", cell(c.map(|s| s.mean)), cell(c.map(|s| s.std)));
    }
    out.push('\n');
}

/// Aggregate CSV: header `stage` followed by `<metric>_mean,<metric>_std`
/// for each metric of [`records_csv`] except `mean_std`.
pub fn summary_csv(report: &MetricReport) -> String {
    let mut s = summary_header("stage");
    for st in &report.stages {
        summary_row(&mut s, &st.stage.to_string(), st);
    }
    s
}

/// Sweep matrix CSV: header `stage,n_train` then the aggregate columns;
/// rows ordered by stage, then training size.
pub fn sweep_csv(entries: &[SweepEntry]) -> String {
    let mut s = summary_header("stage,n_train");
    let n_stages = entries.iter().map(|e| e.report.stages.len()).max().unwrap_or(0);
    for stage in 1..=n_stages {
        for e in entries {
            if let Some(st) = e.report.stages.iter().find(|st| st.stage == stage) {
                summary_row(&mut s, &format!("{stage},{}", e.n_train), st);
            }
        }
    }
    s
}

/// Stage-by-stage mean vectors and covariance matrices as long-format CSV
/// (`stage,kind,i,j,value`; `j` is empty for means).
pub fn moments_csv(stages: &[(usize, &PosteriorEnsemble)]) -> String {
    let mut s = String::from("stage,kind,i,j,value\n");
    for (stage, ens) in stages {
        for (i, v) in ens.mean.iter().enumerate() {
            let _ = writeln!(s, "{stage},mean,{i},,{v:?}");
        }
        let cov: &Tensor = &ens.covariance;
        for i in 0..cov.rows() {
            for j in 0..cov.cols() {
                let _ = writeln!(s, "{stage},cov,{i},{j},{:?}", cov.at(i, j));
            }
        }
    }
    s
}
