//! Conditional affine-coupling normalizing flow.
//!
//! The flow maps a target `x` to a latent `z = f(x; c)` given a conditioner
//! `c`. An optional per-dimension standardization of `x` and `c` comes first,
//! followed by coupling blocks that alternate between transforming the
//! second and the first half of the coordinates. Each block computes
//!
//! ```text
//! [s_raw, t] = net([x_passive, c])
//! s          = s_max · tanh(s_raw / s_max)
//! y_active   = x_active · exp(s) + t
//! ```
//!
//! so the block Jacobian is triangular with log-determinant `Σ s`.
//!
//! The training objective is the exact negative log-density under a
//! standard normal base, `½‖z‖² + (d/2)·ln 2π − log|det J|`, averaged over
//! the batch. The constant does not move the minimizer; keeping it makes
//! the loss an actual NLL (a 1-D standard normal fit converges to its
//! differential entropy, ½(1 + ln 2π)).

mod checkpoint;
mod net;
mod optim;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_VERSION};
pub use net::ConditioningNet;
pub use optim::OptimizerState;
pub use train::{train_flow, train_step, EpochRecord, StepOutcome, TrainConfig, TrainOutcome};

use net::NetTape;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub blocks: usize,
    pub hidden: Vec<usize>,
    pub s_max: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            blocks: 6,
            hidden: vec![128, 128],
            s_max: 2.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::InvalidArgument("flow.blocks must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("flow.hidden widths must be positive".into()));
        }
        if !(self.s_max > 0.0) || !self.s_max.is_finite() {
            return Err(Error::InvalidArgument("flow.s_max must be positive".into()));
        }
        Ok(())
    }
}

/// Per-dimension affine standardization of targets and conditioners.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub c_mean: Vec<f64>,
    pub c_scale: Vec<f64>,
}

fn column_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (t.rows(), t.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(t.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(t.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale = var
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let sd = (s / n as f64).sqrt();
            // constant columns fall back to unit scale
            if sd > 1e-12 * m.abs().max(1.0) {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

impl Normalization {
    /// Column means and (population) standard deviations of a training set.
    pub fn fit(x: &Tensor, cond: &Tensor) -> Self {
        let (x_mean, x_scale) = column_stats(x);
        let (c_mean, c_scale) = column_stats(cond);
        Self {
            x_mean,
            x_scale,
            c_mean,
            c_scale,
        }
    }

    /// `−Σ ln(x_scale)`, the log-determinant of the standardization.
    pub fn log_det(&self) -> f64 {
        -self.x_scale.iter().map(|s| s.ln()).sum::<f64>()
    }
}

/// One coupling block: `mask[i]` is true for coordinates the block rescales.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    mask: Vec<bool>,
    active: Vec<usize>,
    passive: Vec<usize>,
    net: ConditioningNet,
}

impl CouplingBlock {
    fn new(mask: Vec<bool>, net: ConditioningNet) -> Self {
        let active = (0..mask.len()).filter(|&i| mask[i]).collect();
        let passive = (0..mask.len()).filter(|&i| !mask[i]).collect();
        Self {
            mask,
            active,
            passive,
            net,
        }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn net(&self) -> &ConditioningNet {
        &self.net
    }

    /// Evaluates the conditioning net on `[h_passive, cond]` and returns the
    /// squashed log-scales and shifts, each `batch × n_active`.
    fn scale_shift(
        &self,
        h: &[f64],
        cond: &[f64],
        batch: usize,
        x_dim: usize,
        s_max: f64,
        tape: Option<&mut NetTape>,
    ) -> (Vec<f64>, Vec<f64>) {
        let cd = cond.len() / batch.max(1);
        let width = self.passive.len() + cd;
        let mut input = Vec::with_capacity(batch * width);
        for b in 0..batch {
            let row = &h[b * x_dim..(b + 1) * x_dim];
            input.extend(self.passive.iter().map(|&j| row[j]));
            input.extend_from_slice(&cond[b * cd..(b + 1) * cd]);
        }
        let out = self.net.forward(input, batch, tape);
        let na = self.active.len();
        let mut s = Vec::with_capacity(batch * na);
        let mut t = Vec::with_capacity(batch * na);
        for row in out.chunks_exact((2 * na).max(1)).take(if na == 0 { 0 } else { batch }) {
            s.extend(row[..na].iter().map(|&u| s_max * (u / s_max).tanh()));
            t.extend_from_slice(&row[na..]);
        }
        (s, t)
    }
}

/// Cached intermediates of a forward pass, used by the trainer.
pub(crate) struct ForwardTape {
    /// Per block: block input, net tape, squashed log-scales.
    blocks: Vec<(Vec<f64>, NetTape, Vec<f64>)>,
}

/// Conditional coupling flow `z = f(x; c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingFlow {
    x_dim: usize,
    cond_dim: usize,
    s_max: f64,
    blocks: Vec<CouplingBlock>,
    norm: Option<Normalization>,
}

/// Half-mask for block `k`: even blocks rescale the second half of the
/// coordinates, odd blocks the first half.
fn half_mask(x_dim: usize, k: usize) -> Vec<bool> {
    let split = x_dim / 2;
    (0..x_dim)
        .map(|i| if k.is_multiple_of(2) { i >= split } else { i < split })
        .collect()
}

impl CouplingFlow {
    /// Fresh flow with random hidden weights and zero output layers, i.e. the
    /// identity map before normalization.
    pub fn new(x_dim: usize, cond_dim: usize, config: &FlowConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if x_dim == 0 || cond_dim == 0 {
            return Err(Error::InvalidArgument(
                "flow dimensions must be positive".into(),
            ));
        }
        let blocks = (0..config.blocks)
            .map(|k| {
                let mask = half_mask(x_dim, k);
                let n_active = mask.iter().filter(|&&m| m).count();
                let mut widths = vec![x_dim - n_active + cond_dim];
                widths.extend_from_slice(&config.hidden);
                widths.push(2 * n_active);
                CouplingBlock::new(mask, ConditioningNet::new(&widths, rng))
            })
            .collect();
        Ok(Self {
            x_dim,
            cond_dim,
            s_max: config.s_max,
            blocks,
            norm: None,
        })
    }

    pub(crate) fn from_parts(
        x_dim: usize,
        cond_dim: usize,
        s_max: f64,
        parts: Vec<(Vec<bool>, ConditioningNet)>,
        norm: Option<Normalization>,
    ) -> Self {
        Self {
            x_dim,
            cond_dim,
            s_max,
            blocks: parts
                .into_iter()
                .map(|(m, n)| CouplingBlock::new(m, n))
                .collect(),
            norm,
        }
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.norm.as_ref()
    }

    pub fn set_normalization(&mut self, norm: Option<Normalization>) -> Result<()> {
        if let Some(n) = &norm {
            let ok = n.x_mean.len() == self.x_dim
                && n.x_scale.len() == self.x_dim
                && n.c_mean.len() == self.cond_dim
                && n.c_scale.len() == self.cond_dim;
            if !ok {
                return Err(Error::shape("set_normalization", "normalization dims disagree with flow"));
            }
            if n.x_scale.iter().chain(&n.c_scale).any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::InvalidArgument("normalization scales must be positive".into()));
            }
        }
        self.norm = norm;
        Ok(())
    }

    /// Trainable parameters in canonical order: per block, per layer, weight
    /// then bias.
    pub fn params(&self) -> Vec<&[f64]> {
        self.blocks
            .iter()
            .flat_map(|b| b.net.layers.iter())
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.net.layers.iter_mut())
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_inputs(&self, x: &Tensor, cond: &Tensor, op: &'static str) -> Result<usize> {
        if !x.is_matrix() || !cond.is_matrix() {
            return Err(Error::shape(op, "inputs must be batch matrices"));
        }
        if x.cols() != self.x_dim {
            return Err(Error::DimMismatch {
                what: "flow target",
                expected: self.x_dim,
                actual: x.cols(),
            });
        }
        if cond.cols() != self.cond_dim {
            return Err(Error::DimMismatch {
                what: "flow conditioner",
                expected: self.cond_dim,
                actual: cond.cols(),
            });
        }
        if x.rows() != cond.rows() {
            return Err(Error::shape(
                op,
                format!("batch sizes {} and {} disagree", x.rows(), cond.rows()),
            ));
        }
        Ok(x.rows())
    }

    fn normalized_cond(&self, cond: &Tensor) -> Vec<f64> {
        match &self.norm {
            None => cond.data().to_vec(),
            Some(n) => cond
                .data()
                .chunks_exact(self.cond_dim)
                .flat_map(|row| {
                    row.iter()
                        .zip(&n.c_mean)
                        .zip(&n.c_scale)
                        .map(|((v, m), s)| (v - m) / s)
                })
                .collect(),
        }
    }

    pub(crate) fn forward_impl(
        &self,
        x: &Tensor,
        cond: &Tensor,
        mut tape: Option<&mut ForwardTape>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let batch = self.check_inputs(x, cond, "forward")?;
        let d = self.x_dim;
        let c = self.normalized_cond(cond);
        let mut h = x.data().to_vec();
        let mut log_det = vec![0.0; batch];
        if let Some(n) = &self.norm {
            for row in h.chunks_exact_mut(d) {
                for ((v, m), s) in row.iter_mut().zip(&n.x_mean).zip(&n.x_scale) {
                    *v = (*v - m) / s;
                }
            }
            log_det.iter_mut().for_each(|l| *l = n.log_det());
        }
        if let Some(t) = tape.as_deref_mut() {
            t.blocks.clear();
        }
        for block in &self.blocks {
            let mut net_tape = NetTape {
                activations: Vec::new(),
            };
            let (s, t) = block.scale_shift(
                &h,
                &c,
                batch,
                d,
                self.s_max,
                tape.is_some().then_some(&mut net_tape),
            );
            let input = tape.is_some().then(|| h.clone());
            let na = block.active.len();
            for b in 0..batch {
                let row = &mut h[b * d..(b + 1) * d];
                for (k, &j) in block.active.iter().enumerate() {
                    let sk = s[b * na + k];
                    row[j] = row[j] * sk.exp() + t[b * na + k];
                    log_det[b] += sk;
                }
            }
            if let Some(tp) = tape.as_deref_mut() {
                tp.blocks.push((input.unwrap_or_default(), net_tape, s));
            }
        }
        if h.iter().chain(&log_det).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow forward activations".into()));
        }
        Ok((h, log_det))
    }

    /// `z = f(x; cond)` together with `log|det ∂z/∂x|` per batch row.
    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let (z, ld) = self.forward_impl(x, cond, None)?;
        Ok((Tensor::matrix(x.rows(), self.x_dim, z)?, ld))
    }

    /// `x = f⁻¹(z; cond)` together with `log|det ∂x/∂z|` per batch row.
    pub fn inverse_with_log_det(&self, z: &Tensor, cond: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let batch = self.check_inputs(z, cond, "inverse")?;
        let d = self.x_dim;
        let c = self.normalized_cond(cond);
        let mut h = z.data().to_vec();
        let mut log_det = vec![0.0; batch];
        for block in self.blocks.iter().rev() {
            let (s, t) = block.scale_shift(&h, &c, batch, d, self.s_max, None);
            let na = block.active.len();
            for b in 0..batch {
                let row = &mut h[b * d..(b + 1) * d];
                for (k, &j) in block.active.iter().enumerate() {
                    let sk = s[b * na + k];
                    row[j] = (row[j] - t[b * na + k]) * (-sk).exp();
                    log_det[b] -= sk;
                }
            }
        }
        if let Some(n) = &self.norm {
            for row in h.chunks_exact_mut(d) {
                for ((v, m), s) in row.iter_mut().zip(&n.x_mean).zip(&n.x_scale) {
                    *v = *v * s + m;
                }
            }
            log_det.iter_mut().for_each(|l| *l -= n.log_det());
        }
        if h.iter().chain(&log_det).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow inverse activations".into()));
        }
        Ok((Tensor::matrix(batch, d, h)?, log_det))
    }

    pub fn inverse(&self, z: &Tensor, cond: &Tensor) -> Result<Tensor> {
        Ok(self.inverse_with_log_det(z, cond)?.0)
    }

    /// Per-row negative log-density `−log p(x | cond)`.
    pub fn nll_per_row(&self, x: &Tensor, cond: &Tensor) -> Result<Vec<f64>> {
        let (z, ld) = self.forward_impl(x, cond, None)?;
        Ok(z.chunks_exact(self.x_dim)
            .zip(&ld)
            .map(|(row, l)| self.row_nll(row, *l))
            .collect())
    }

    fn row_nll(&self, z: &[f64], log_det: f64) -> f64 {
        0.5 * z.iter().map(|v| v * v).sum::<f64>() + self.x_dim as f64 * HALF_LN_2PI - log_det
    }

    /// Batch-mean negative log-likelihood.
    pub fn nll_loss(&self, x: &Tensor, cond: &Tensor) -> Result<f64> {
        if x.rows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let nll = self.nll_per_row(x, cond)?;
        let loss = nll.iter().sum::<f64>() / nll.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("nll loss".into()));
        }
        Ok(loss)
    }

    /// Loss and its gradient with respect to every parameter tensor (same
    /// order as [`CouplingFlow::params`]).
    pub fn loss_and_grad(&self, x: &Tensor, cond: &Tensor) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = ForwardTape { blocks: Vec::new() };
        let (z, ld) = self.forward_impl(x, cond, Some(&mut tape))?;
        let batch = x.rows();
        let d = self.x_dim;
        let inv_b = 1.0 / batch as f64;
        let loss = z
            .chunks_exact(d)
            .zip(&ld)
            .map(|(row, l)| self.row_nll(row, *l))
            .sum::<f64>()
            * inv_b;

        let mut grads: Vec<Vec<f64>> = self.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let mut offset = grads.len();
        // dL/dz
        let mut g: Vec<f64> = z.iter().map(|v| v * inv_b).collect();
        let c_width = self.cond_dim;
        for (block, (input, net_tape, s)) in self.blocks.iter().zip(&tape.blocks).rev() {
            let n_slots = 2 * block.net.layers.len();
            offset -= n_slots;
            let na = block.active.len();
            let np = block.passive.len();
            let mut g_out = vec![0.0; batch * 2 * na];
            let mut g_in = g.clone();
            for b in 0..batch {
                let xin = &input[b * d..(b + 1) * d];
                let grow = &g[b * d..(b + 1) * d];
                for (k, &j) in block.active.iter().enumerate() {
                    let sk = s[b * na + k];
                    let e = sk.exp();
                    let gy = grow[j];
                    g_in[b * d + j] = gy * e;
                    let gs = gy * xin[j] * e - inv_b;
                    let r = sk / self.s_max;
                    g_out[b * 2 * na + k] = gs * (1.0 - r * r);
                    g_out[b * 2 * na + na + k] = gy;
                }
            }
            let g_net_in = block.net.backward(
                net_tape,
                g_out,
                batch,
                &mut grads[offset..offset + n_slots],
            );
            let width = np + c_width;
            for b in 0..batch {
                for (k, &j) in block.passive.iter().enumerate() {
                    g_in[b * d + j] += g_net_in[b * width + k];
                }
            }
            g = g_in;
        }
        Ok((loss, grads))
    }
}

/// `n` conditional draws `f⁻¹(z; cond)` with `z ~ N(0, I)`.
pub fn sample(flow: &CouplingFlow, cond: &[f64], n: usize, rng: &mut Rng) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    if cond.len() != flow.cond_dim() {
        return Err(Error::DimMismatch {
            what: "flow conditioner",
            expected: flow.cond_dim(),
            actual: cond.len(),
        });
    }
    let mut z = vec![0.0; n * flow.x_dim()];
    rng.fill_standard_normal(&mut z);
    let z = Tensor::matrix(n, flow.x_dim(), z)?;
    let c = Tensor::matrix(n, flow.cond_dim(), cond.repeat(n))?;
    flow.inverse(&z, &c)
}

const MEAN_CHUNK: usize = 4096;

/// Empirical mean of `n_s` conditional draws.
pub fn posterior_mean_estimate(
    flow: &CouplingFlow,
    cond: &[f64],
    n_s: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if n_s == 0 {
        return Err(Error::InvalidArgument("n_s must be positive".into()));
    }
    let mut sum = vec![0.0; flow.x_dim()];
    let mut remaining = n_s;
    while remaining > 0 {
        let n = remaining.min(MEAN_CHUNK);
        let draws = sample(flow, cond, n, rng)?;
        for i in 0..n {
            for (s, v) in sum.iter_mut().zip(draws.row(i)) {
                *s += v;
            }
        }
        remaining -= n;
    }
    Ok(sum.into_iter().map(|s| s / n_s as f64).collect())
}
