//! Per-stage training sets of `(Δx, ȳ)` pairs built around moving fiducials.
//!
//! Every record keeps the ground truth `x`, its observation `y`, the current
//! fiducial `x_i`, the residual target `Δx_i = x − x_i` and the score summary
//! `ȳ_i = ∇ log p(y | x_i)`. Randomness for record `n` at stage `i` comes
//! from a child stream keyed by `(domain, i, n)`, so results do not depend on
//! how the records are scheduled across threads.

use rayon::prelude::*;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::flow::{posterior_mean_estimate, CouplingFlow};
use crate::numerics::{Rng, Tensor};
use crate::problems::InverseProblem;

const STREAM_PRIOR: u64 = 0x5052_494f;
const STREAM_NOISE: u64 = 0x4e4f_4953;
const STREAM_ADVANCE: u64 = 0x4144_5641;

/// Fraction of records held out for early stopping.
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub x_true: Vec<f64>,
    pub y: Vec<f64>,
    pub fiducial: Vec<f64>,
    pub residual: Vec<f64>,
    pub summary: Vec<f64>,
    pub split: Split,
}

impl Record {
    fn new(problem: &dyn InverseProblem, x_true: Vec<f64>, y: Vec<f64>, fiducial: Vec<f64>, split: Split) -> Result<Self> {
        let residual = x_true.iter().zip(&fiducial).map(|(a, b)| a - b).collect();
        let summary = problem.score(&fiducial, &y)?;
        Ok(Self {
            x_true,
            y,
            fiducial,
            residual,
            summary,
            split,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiducialDataset {
    stage: usize,
    x_dim: usize,
    y_dim: usize,
    records: Vec<Record>,
    /// Opaque 32-byte tag (the run's config hash) carried through files.
    pub provenance: [u8; 32],
}

fn split_for(index: usize, count: usize) -> Split {
    let n_val = (count as f64 * VALIDATION_FRACTION).floor() as usize;
    if index >= count - n_val {
        Split::Validation
    } else {
        Split::Train
    }
}

/// Stage-0 dataset: `x ~ p(x)`, `y = F(x) + ε`, `x₀` the problem's default
/// fiducial.
pub fn build_stage0(problem: &dyn InverseProblem, n_train: usize, rng: &Rng) -> Result<FiducialDataset> {
    if n_train == 0 {
        return Err(Error::InvalidArgument("n_train must be at least 1".into()));
    }
    let x0 = problem.default_fiducial();
    let records = (0..n_train)
        .into_par_iter()
        .map(|n| {
            let x = problem.sample_prior(&mut rng.stream(&[STREAM_PRIOR, n as u64]));
            let y = problem.simulate(&x, &mut rng.stream(&[STREAM_NOISE, n as u64]))?;
            Record::new(problem, x, y, x0.clone(), split_for(n, n_train))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FiducialDataset {
        stage: 0,
        x_dim: problem.x_dim(),
        y_dim: problem.y_dim(),
        records,
        provenance: [0; 32],
    })
}

/// Result of moving every fiducial one stage forward.
#[derive(Debug, Clone)]
pub struct Advanced {
    pub dataset: FiducialDataset,
    /// Records whose update was non-finite; their fiducial is left unchanged.
    pub flagged: Vec<usize>,
}

/// `x_{i+1} = x_i + E[Δx | ȳ_i]` for every record, estimated with `n_s`
/// flow draws, then residuals and summaries are recomputed.
pub fn advance_stage(
    ds: &FiducialDataset,
    flow: &CouplingFlow,
    problem: &dyn InverseProblem,
    n_s: usize,
    rng: &Rng,
) -> Result<Advanced> {
    if flow.x_dim() != ds.x_dim || flow.cond_dim() != ds.x_dim {
        return Err(Error::DimMismatch {
            what: "flow dimension for dataset advance",
            expected: ds.x_dim,
            actual: flow.x_dim(),
        });
    }
    let stage = ds.stage as u64;
    let out = ds
        .records
        .par_iter()
        .enumerate()
        .map(|(n, rec)| {
            let mut r = rng.stream(&[STREAM_ADVANCE, stage, n as u64]);
            let step = match posterior_mean_estimate(flow, &rec.summary, n_s, &mut r) {
                Ok(m) if m.iter().all(|v| v.is_finite()) => Some(m),
                Ok(_) | Err(Error::NonFinite(_)) => None,
                Err(e) => return Err(e),
            };
            let fiducial: Vec<f64> = match &step {
                Some(m) => rec.fiducial.iter().zip(m).map(|(a, b)| a + b).collect(),
                None => rec.fiducial.clone(),
            };
            let next = Record::new(problem, rec.x_true.clone(), rec.y.clone(), fiducial, rec.split)?;
            Ok((next, step.is_none()))
        })
        .collect::<Result<Vec<_>>>()?;
    let flagged = out.iter().enumerate().filter(|(_, (_, f))| *f).map(|(i, _)| i).collect();
    Ok(Advanced {
        dataset: FiducialDataset {
            stage: ds.stage + 1,
            x_dim: ds.x_dim,
            y_dim: ds.y_dim,
            records: out.into_iter().map(|(r, _)| r).collect(),
            provenance: ds.provenance,
        },
        flagged,
    })
}

impl FiducialDataset {
    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn y_dim(&self) -> usize {
        self.y_dim
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(Δx, ȳ)` matrices for one split, or `None` when it is empty.
    pub fn pairs(&self, split: Split) -> Option<(Tensor, Tensor)> {
        let recs: Vec<&Record> = self.records.iter().filter(|r| r.split == split).collect();
        if recs.is_empty() {
            return None;
        }
        let n = recs.len();
        let dx = recs.iter().flat_map(|r| r.residual.iter().copied()).collect();
        let yb = recs.iter().flat_map(|r| r.summary.iter().copied()).collect();
        Some((
            Tensor::matrix(n, self.x_dim, dx).ok()?,
            Tensor::matrix(n, self.x_dim, yb).ok()?,
        ))
    }

    /// Re-derives residuals and summaries and compares them bitwise.
    pub fn verify(&self, problem: &dyn InverseProblem) -> Result<()> {
        for (n, r) in self.records.iter().enumerate() {
            let residual_ok = r
                .x_true
                .iter()
                .zip(&r.fiducial)
                .zip(&r.residual)
                .all(|((x, f), d)| (x - f).to_bits() == d.to_bits());
            let summary = problem.score(&r.fiducial, &r.y)?;
            let summary_ok = summary.iter().zip(&r.summary).all(|(a, b)| a.to_bits() == b.to_bits());
            if !residual_ok || !summary_ok {
                return Err(Error::InvalidArgument(format!(
                    "record {n} is inconsistent with its fiducial"
                )));
            }
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"ITFLOWDS";
pub const DATASET_VERSION: u32 = 1;
const KIND: &str = "dataset";

/// Serializes a dataset.
///
/// ```text
/// magic       8 bytes "ITFLOWDS"
/// version     u32
/// stage       u32
/// x_dim       u32
/// y_dim       u32
/// count       u64
/// provenance  32 bytes
/// splits      count bytes, 0 = train, 1 = validation
/// records     count × [x_true(x_dim) y(y_dim) fiducial(x_dim)
///                      residual(x_dim) summary(x_dim)] as f64
/// ```
/// All integers and floats little-endian.
pub fn save_dataset(ds: &FiducialDataset) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(DATASET_VERSION);
    w.u32(ds.stage as u32);
    w.u32(ds.x_dim as u32);
    w.u32(ds.y_dim as u32);
    w.u64(ds.records.len() as u64);
    w.bytes(&ds.provenance);
    for r in &ds.records {
        w.u8(matches!(r.split, Split::Validation) as u8);
    }
    for r in &ds.records {
        w.f64s(&r.x_true);
        w.f64s(&r.y);
        w.f64s(&r.fiducial);
        w.f64s(&r.residual);
        w.f64s(&r.summary);
    }
    w.finish()
}

pub fn load_dataset(bytes: &[u8]) -> Result<FiducialDataset> {
    let mut r = ByteReader::new(KIND, bytes);
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::format(KIND, "bad magic header"));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            kind: KIND,
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let stage = r.u32()? as usize;
    let x_dim = r.u32()? as usize;
    let y_dim = r.u32()? as usize;
    let count = r.u64()?;
    if x_dim == 0 || y_dim == 0 {
        return Err(Error::format(KIND, "zero dimension"));
    }
    let stride = (4 * x_dim + y_dim) as u64 * 8 + 1;
    let remaining = (bytes.len() as u64).saturating_sub(8 + 4 * 4 + 8 + 32);
    if count.checked_mul(stride) != Some(remaining) {
        return Err(Error::format(
            KIND,
            format!("{count} records of {stride} bytes do not match {remaining} payload bytes"),
        ));
    }
    let count = count as usize;
    let mut provenance = [0u8; 32];
    provenance.copy_from_slice(r.take(32)?);
    let splits = r.take(count)?;
    let mut records = Vec::with_capacity(count);
    for &s in splits {
        let split = match s {
            0 => Split::Train,
            1 => Split::Validation,
            other => return Err(Error::format(KIND, format!("bad split tag {other}"))),
        };
        records.push(Record {
            x_true: r.f64s(x_dim)?,
            y: r.f64s(y_dim)?,
            fiducial: r.f64s(x_dim)?,
            residual: r.f64s(x_dim)?,
            summary: r.f64s(x_dim)?,
            split,
        });
    }
    r.finish()?;
    Ok(FiducialDataset {
        stage,
        x_dim,
        y_dim,
        records,
        provenance,
    })
}

/// Loads a dataset and checks that it is at the expected stage.
pub fn load_dataset_expecting(bytes: &[u8], stage: usize) -> Result<FiducialDataset> {
    let ds = load_dataset(bytes)?;
    if ds.stage != stage {
        return Err(Error::StageMismatch {
            expected: stage,
            found: ds.stage,
        });
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use crate::problems::{LinearConfig, LinearGaussianProblem};

    fn problem() -> LinearGaussianProblem {
        LinearGaussianProblem::replication(
            &LinearConfig {
                x_dim: 4,
                y_dim: 8,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn zero_fiducial_residual_is_truth() {
        let p = problem();
        let ds = build_stage0(&p, 20, &Rng::new(1)).unwrap();
        assert_eq!(ds.len(), 20);
        for r in ds.records() {
            assert_eq!(r.residual, r.x_true);
            assert_eq!(r.fiducial, vec![0.0; 4]);
        }
        ds.verify(&p).unwrap();
        assert_eq!(ds.records().iter().filter(|r| r.split == Split::Validation).count(), 2);
    }

    #[test]
    fn rejects_empty() {
        assert!(build_stage0(&problem(), 0, &Rng::new(1)).is_err());
    }

    #[test]
    fn identity_flow_advance_is_a_null_update() {
        let p = problem();
        let ds = build_stage0(&p, 10, &Rng::new(2)).unwrap();
        let flow = CouplingFlow::new(4, 4, &FlowConfig::default(), &mut Rng::new(3)).unwrap();
        let adv = advance_stage(&ds, &flow, &p, 4096, &Rng::new(4)).unwrap();
        assert!(adv.flagged.is_empty());
        let next = adv.dataset;
        assert_eq!(next.stage(), 1);
        next.verify(&p).unwrap();
        for (a, b) in ds.records().iter().zip(next.records()) {
            assert_eq!(a.x_true, b.x_true);
            assert_eq!(a.y, b.y);
            for (f0, f1) in a.fiducial.iter().zip(&b.fiducial) {
                // 4.5 standard errors of a 4096-sample mean of N(0, 1)
                assert!((f1 - f0).abs() < 4.5 / 64.0);
            }
        }
    }

    #[test]
    fn serialization_round_trip_and_errors() {
        let p = problem();
        let mut ds = build_stage0(&p, 7, &Rng::new(5)).unwrap();
        ds.provenance[0] = 42;
        let bytes = save_dataset(&ds);
        let back = load_dataset(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(save_dataset(&back), bytes);
        assert!(matches!(load_dataset(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        assert!(matches!(
            load_dataset_expecting(&bytes, 1),
            Err(Error::StageMismatch { expected: 1, found: 0 })
        ));
    }
}
