use serde::{Deserialize, Serialize};

use super::model::ModelGraph;
use super::optim::{LrSchedule, OptimizerKind, OptimizerState};
use crate::data::{BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::schedule::MetricRecord;
use crate::tensor::{RngStream, Tensor};

/// State visible to a hook right after the optimizer step at `step`.
pub struct StepContext<'a> {
    pub step: u64,
    pub model: &'a mut ModelGraph,
    pub batch: &'a Tensor,
    pub labels: &'a [usize],
    pub lr: f64,
    /// Loss of the forward pass that produced this step's gradients.
    pub train_loss: f64,
}

/// Called once per step, after the optimizer update and before evaluation.
pub trait StepHook {
    fn on_step(&mut self, ctx: &mut StepContext<'_>) -> Result<Option<MetricRecord>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: LrSchedule,
    /// Evaluate on the held-out set every this many steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "default_eval_chunk")]
    pub eval_chunk: usize,
}

fn default_eval_chunk() -> usize {
    1000
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        self.optimizer.validate()?;
        self.lr.validate()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricRecord>,
    pub final_accuracy: Option<f64>,
    pub optimizer: OptimizerState,
}

/// Runs `cfg.n_steps` mini-batch updates. Epoch `e` is shuffled with
/// `rng.derive(e)`. Records are emitted for steps where a hook reports or
/// an evaluation runs, so the stream is strictly increasing in step.
pub fn train_steps(
    model: &mut ModelGraph,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    rng: &RngStream,
    hooks: &mut [&mut dyn StepHook],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    let mut stream = BatchStream::new(train.len(), cfg.batch_size, rng.clone())?;
    let mut opt = OptimizerState::new(cfg.optimizer, model)?;
    let mut records = Vec::new();
    let mut final_accuracy = None;

    for t in 1..=cfg.n_steps {
        let idx = stream.next_batch().to_vec();
        let (batch, labels) = train.gather(&idx);
        let (loss, _) = model.forward(&batch, &labels).map_err(|e| e.at_step(t))?;
        if !loss.is_finite() || loss < 0.0 {
            return Err(Error::Numeric {
                message: format!("training loss became {loss}"),
                iterations: t as usize,
            }
            .at_step(t));
        }
        model.backward().map_err(|e| e.at_step(t))?;
        let lr = cfg.lr.lr_at(t);
        opt.step(model, lr).map_err(|e| e.at_step(t))?;

        let mut record: Option<MetricRecord> = None;
        let mut ctx = StepContext {
            step: t,
            model,
            batch: &batch,
            labels: &labels,
            lr,
            train_loss: loss,
        };
        for hook in hooks.iter_mut() {
            if let Some(r) = hook.on_step(&mut ctx).map_err(|e| e.at_step(t))? {
                record = Some(match record {
                    Some(prev) => prev.merge(r),
                    None => r,
                });
            }
        }

        let due = (cfg.eval_every > 0 && t % cfg.eval_every == 0) || t == cfg.n_steps;
        if let (Some(ds), true) = (eval, due) {
            let acc = model
                .accuracy(&ds.images, &ds.labels, cfg.eval_chunk)
                .map_err(|e| e.at_step(t))?;
            final_accuracy = Some(acc);
            let r = record.take().unwrap_or_else(|| MetricRecord::new(t, loss));
            record = Some(MetricRecord {
                test_accuracy: Some(acc),
                ..r
            });
        }
        if let Some(r) = record {
            records.push(r);
        }
    }
    Ok(TrainOutcome {
        records,
        final_accuracy,
        optimizer: opt,
    })
}
