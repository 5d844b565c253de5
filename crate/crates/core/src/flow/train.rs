//! Maximum-likelihood fitting of a [`CouplingFlow`] by minibatch Adam with
//! early stopping on a held-out split.

use serde::{Deserialize, Serialize};

use super::{CouplingFlow, OptimizerState};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 300,
            patience: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument("train.lr must be a non-negative number".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::InvalidArgument(
                "train.batch_size, train.max_epochs and train.patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Loss before the update (NaN if the forward pass itself failed).
    pub loss: f64,
    /// False when the step was skipped because of non-finite values.
    pub applied: bool,
}

/// One Adam step on `(x, cond)`.
pub fn train_step(
    flow: &mut CouplingFlow,
    opt: &mut OptimizerState,
    x: &Tensor,
    cond: &Tensor,
) -> Result<StepOutcome> {
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (loss, grads) = match flow.loss_and_grad(x, cond) {
        Ok(v) => v,
        Err(Error::NonFinite(_)) => {
            return Ok(StepOutcome {
                loss: f64::NAN,
                applied: false,
            })
        }
        Err(e) => return Err(e),
    };
    if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Ok(StepOutcome {
            loss,
            applied: false,
        });
    }
    opt.apply(flow, &grads);
    Ok(StepOutcome {
        loss,
        applied: true,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation NLL, or NaN without a validation split.
    pub val_loss: f64,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_loss: f64,
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), c, data).expect("non-empty batch")
}

/// Trains until the monitored loss (validation NLL when a split is given,
/// otherwise the epoch-mean training loss) fails to improve for
/// `config.patience` epochs, then restores the best weights seen.
pub fn train_flow(
    flow: &mut CouplingFlow,
    train: (&Tensor, &Tensor),
    val: Option<(&Tensor, &Tensor)>,
    config: &TrainConfig,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let (x, c) = train;
    let n = x.rows();
    if n == 0 || c.rows() != n {
        return Err(Error::InvalidArgument("training set is empty or ragged".into()));
    }
    let mut opt = OptimizerState::new(flow, config.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = (f64::INFINITY, 0usize, flow.clone());
    let mut history = Vec::new();
    for epoch in 0..config.max_epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut applied = 0usize;
        let mut skipped = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let out = train_step(flow, &mut opt, &gather_rows(x, chunk), &gather_rows(c, chunk))?;
            if out.applied {
                sum += out.loss * chunk.len() as f64;
                applied += chunk.len();
            } else {
                skipped += 1;
            }
        }
        if applied == 0 {
            return Err(Error::NonFinite(format!(
                "every training step in epoch {epoch} produced non-finite values"
            )));
        }
        let train_loss = sum / applied as f64;
        let val_loss = match val {
            Some((vx, vc)) if vx.rows() > 0 => flow.nll_loss(vx, vc).unwrap_or(f64::NAN),
            _ => f64::NAN,
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            skipped_steps: skipped,
        };
        on_epoch(&record);
        history.push(record);
        let monitored = if val.is_some_and(|(vx, _)| vx.rows() > 0) {
            val_loss
        } else {
            train_loss
        };
        if monitored < best.0 {
            best = (monitored, epoch, flow.clone());
        } else if epoch - best.1 >= config.patience {
            break;
        }
    }
    let (best_loss, best_epoch, best_flow) = best;
    if best_loss.is_finite() {
        *flow = best_flow;
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_loss,
    })
}
