//! When and how strongly to regularize, plus the per-event metric stream.

mod metrics;

use serde::{Deserialize, Serialize};

pub use metrics::{
    read_metrics_csv, read_metrics_jsonl, write_metrics_csv, write_metrics_jsonl, MetricRecord,
    METRIC_COLUMNS,
};

use crate::compress::{apply, prune_mask, ApplyStats, CompressionSpec, Operator};
use crate::error::{Error, Result};
use crate::nn::{StepContext, StepHook};
use crate::tensor::RngStream;

/// Reference per-batch strengths `e_w / pNR` for the LSTM language model.
pub const E_OPT_LSTM_WEIGHT_DECAY: f64 = 0.0007;
pub const E_OPT_LSTM_SVD: f64 = 0.08;
pub const E_OPT_LSTM_PRUNING: f64 = 0.035;
/// Reference per-batch strengths for ResNet-32 on CIFAR-10.
pub const E_OPT_RESNET_WEIGHT_DECAY: f64 = 9.46e-6;
pub const E_OPT_RESNET_QUANTIZATION: f64 = 9.38e-6;
pub const E_OPT_RESNET_PRUNING: f64 = 4.25e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampShape {
    Cubic,
    Linear,
}

/// Ramp from 0 at `start_step` to the final rate at `end_step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradualSchedule {
    pub start_step: u64,
    pub end_step: u64,
    #[serde(default = "cubic")]
    pub shape: RampShape,
}

fn cubic() -> RampShape {
    RampShape::Cubic
}

impl GradualSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.end_step <= self.start_step {
            return Err(Error::param(format!(
                "gradual schedule end {} must exceed start {}",
                self.end_step, self.start_step
            )));
        }
        Ok(())
    }

    /// Fraction of the final rate reached at step `t`, in `[0, 1]`.
    pub fn progress(&self, t: u64) -> f64 {
        let span = (self.end_step - self.start_step) as f64;
        let x = ((t as f64 - self.start_step as f64) / span).clamp(0.0, 1.0);
        match self.shape {
            RampShape::Cubic => 1.0 - (1.0 - x).powi(3),
            RampShape::Linear => x,
        }
    }

    /// `s_f · (1 − (1 − clamp((t − start)/(end − start)))³)` for the cubic shape.
    pub fn target_rate(&self, t: u64, final_rate: f64) -> Result<f64> {
        self.validate()?;
        Ok(final_rate * self.progress(t))
    }
}

/// Occasional-regularization plan: every `pnr` steps apply each rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NrSchedule {
    pub pnr: u64,
    #[serde(default)]
    pub rules: Vec<CompressionSpec>,
    /// Ramps pruning rates; other operators are applied as configured.
    #[serde(default)]
    pub gradual: Option<GradualSchedule>,
    #[serde(default)]
    pub stop_at_event: bool,
    /// Reference strength for the per-event `reg_error` column.
    #[serde(default)]
    pub e_opt: Option<f64>,
    /// Evaluate the batch loss before and after each event for ΔL/L.
    #[serde(default = "default_true")]
    pub track_loss: bool,
}

fn default_true() -> bool {
    true
}

impl NrSchedule {
    pub fn new(pnr: u64, rules: Vec<CompressionSpec>) -> Self {
        NrSchedule {
            pnr,
            rules,
            gradual: None,
            stop_at_event: false,
            e_opt: None,
            track_loss: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pnr == 0 {
            return Err(Error::param("pNR must be >= 1"));
        }
        for r in &self.rules {
            r.op.validate()?;
        }
        if let Some(g) = &self.gradual {
            g.validate()?;
        }
        if let Some(e) = self.e_opt {
            if !(e > 0.0) {
                return Err(Error::param("e_opt must be > 0"));
            }
        }
        Ok(())
    }

    pub fn should_regularize(&self, t: u64) -> bool {
        t > 0 && t % self.pnr == 0
    }

    pub fn event_count(&self, n_steps: u64) -> u64 {
        n_steps / self.pnr
    }

    /// The operator a rule applies at step `t`, with any ramp folded in.
    pub fn effective_op(&self, rule: &CompressionSpec, t: u64) -> Operator {
        match (&rule.op, &self.gradual) {
            (Operator::Prune { rate }, Some(g)) => rule.op.with_rate(rate * g.progress(t)),
            _ => rule.op.clone(),
        }
    }
}

/// Outcome of one regularization event.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSummary {
    pub step: u64,
    pub stats: ApplyStats,
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
}

/// Training hook implementing train / compress / continue.
pub struct NrHook {
    pub schedule: NrSchedule,
    rng: RngStream,
    /// `e_w` of every event so far.
    pub e_w_series: Vec<f64>,
    pub last_event: Option<EventSummary>,
}

impl NrHook {
    pub fn new(schedule: NrSchedule, rng: RngStream) -> Result<Self> {
        schedule.validate()?;
        Ok(NrHook {
            schedule,
            rng,
            e_w_series: Vec::new(),
            last_event: None,
        })
    }

    pub fn event_count(&self) -> usize {
        self.e_w_series.len()
    }
}

impl StepHook for NrHook {
    fn on_step(&mut self, ctx: &mut StepContext<'_>) -> Result<Option<MetricRecord>> {
        let t = ctx.step;
        if !self.schedule.should_regularize(t) || self.schedule.rules.is_empty() {
            return Ok(None);
        }
        let loss_before = if self.schedule.track_loss {
            Some(ctx.model.loss(ctx.batch, ctx.labels)?)
        } else {
            None
        };
        let mut stats = ApplyStats::default();
        let mut rng = self.rng.derive(t);
        let mut first_rate = None;
        for rule in &self.schedule.rules {
            let op = self.schedule.effective_op(rule, t);
            if let (None, Operator::Prune { rate }) = (first_rate, &op) {
                first_rate = Some(*rate);
            }
            let spec = CompressionSpec {
                op,
                layers: rule.layers.clone(),
            };
            stats
                .layers
                .extend(apply(&spec, ctx.model, ctx.lr, &mut rng)?.layers);
        }
        let loss_after = if self.schedule.track_loss {
            Some(ctx.model.loss(ctx.batch, ctx.labels)?)
        } else {
            None
        };
        let e_w = stats.e_w();
        self.e_w_series.push(e_w);
        let record = MetricRecord {
            event: true,
            rate: first_rate,
            e_w: Some(e_w),
            reg_error: self
                .schedule
                .e_opt
                .map(|e| (e_w / self.schedule.pnr as f64 - e).abs()),
            delta_loss_rel: match (loss_before, loss_after) {
                (Some(b), Some(a)) if b > 0.0 => Some((a - b) / b),
                _ => None,
            },
            delta_w: Some(stats.delta_w()),
            ..MetricRecord::new(t, ctx.train_loss)
        };
        self.last_event = Some(EventSummary {
            step: t,
            stats,
            loss_before,
            loss_after,
        });
        Ok(Some(record))
    }
}

/// One-shot magnitude pruning at `at_step`, then the same masks re-applied
/// after every later step (prune-then-finetune with fixed masks).
pub struct FixedMaskPrune {
    pub at_step: u64,
    pub rules: Vec<(String, f64)>,
    masks: Vec<(String, Vec<bool>)>,
}

impl FixedMaskPrune {
    pub fn new(at_step: u64, rules: Vec<(String, f64)>) -> Self {
        FixedMaskPrune {
            at_step,
            rules,
            masks: Vec::new(),
        }
    }
}

impl StepHook for FixedMaskPrune {
    fn on_step(&mut self, ctx: &mut StepContext<'_>) -> Result<Option<MetricRecord>> {
        if ctx.step < self.at_step {
            return Ok(None);
        }
        if self.masks.is_empty() {
            for (name, rate) in &self.rules {
                let layer = ctx
                    .model
                    .layer(name)
                    .ok_or_else(|| Error::param(format!("no layer named `{name}`")))?;
                let w = layer
                    .weight()
                    .ok_or_else(|| Error::param(format!("layer `{name}` has no weights")))?;
                self.masks.push((name.clone(), prune_mask(w, *rate)?));
            }
        }
        for (name, mask) in &self.masks {
            let w = ctx
                .model
                .layer_mut(name)
                .and_then(|l| l.weight_mut())
                .expect("checked above");
            for (v, &keep) in w.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
        Ok(None)
    }
}

/// `|mean(e_w)/pNR − e_opt|`.
pub fn regularization_error(e_w: &[f64], pnr: u64, e_opt: f64) -> Result<f64> {
    if e_w.is_empty() {
        return Err(Error::param("regularization error of an empty e_w series"));
    }
    if !(e_opt > 0.0) || pnr == 0 {
        return Err(Error::param("need e_opt > 0 and pNR >= 1"));
    }
    let mean = e_w.iter().sum::<f64>() / e_w.len() as f64;
    Ok((mean / pnr as f64 - e_opt).abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EOptProvenance {
    Configured,
    EstimatedFromSweep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EOptEstimate {
    pub e_opt: f64,
    pub provenance: EOptProvenance,
}

/// One finished run of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub pnr: u64,
    pub mean_e_w: f64,
    pub accuracy: f64,
}

pub const E_OPT_BAND: f64 = 0.001;

/// Mean `e_w/pNR` over runs whose accuracy is within `band` of the best.
pub fn estimate_e_opt(points: &[SweepPoint], band: f64) -> Result<EOptEstimate> {
    if points.len() < 2 {
        return Err(Error::param(format!(
            "estimating e_opt needs at least 2 sweep points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|p| p.pnr == 0) {
        return Err(Error::param("sweep point with pNR = 0"));
    }
    let best = points
        .iter()
        .map(|p| p.accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let chosen: Vec<f64> = points
        .iter()
        .filter(|p| p.accuracy >= best - band)
        .map(|p| p.mean_e_w / p.pnr as f64)
        .collect();
    let e_opt = chosen.iter().sum::<f64>() / chosen.len() as f64;
    if !(e_opt > 0.0) {
        return Err(Error::Numeric {
            message: "estimated e_opt is not positive".into(),
            iterations: 0,
        });
    }
    Ok(EOptEstimate {
        e_opt,
        provenance: EOptProvenance::EstimatedFromSweep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn should_regularize_counts() {
        let s = NrSchedule::new(1, vec![]);
        assert!(!s.should_regularize(0));
        assert!((1..50).all(|t| s.should_regularize(t)));
        let s = NrSchedule::new(10, vec![]);
        let hits: Vec<u64> = (0..=35).filter(|&t| s.should_regularize(t)).collect();
        assert_eq!(hits, vec![10, 20, 30]);
        assert_eq!(
            (1..=20000).filter(|&t| s.should_regularize(t)).count(),
            2000
        );
        assert_eq!(s.event_count(20000), 2000);
    }

    #[test]
    fn cubic_ramp() {
        let g = GradualSchedule {
            start_step: 100,
            end_step: 300,
            shape: RampShape::Cubic,
        };
        assert_eq!(g.target_rate(100, 0.8).unwrap(), 0.0);
        assert_eq!(g.target_rate(50, 0.8).unwrap(), 0.0);
        assert_eq!(g.target_rate(300, 0.8).unwrap(), 0.8);
        assert_eq!(g.target_rate(1000, 0.8).unwrap(), 0.8);
        assert!((g.target_rate(200, 0.8).unwrap() - 0.7).abs() < 1e-15);
        let bad = GradualSchedule {
            start_step: 5,
            end_step: 5,
            shape: RampShape::Linear,
        };
        assert!(bad.target_rate(5, 0.5).is_err());
    }

    #[test]
    fn ramp_is_monotone() {
        for shape in [RampShape::Cubic, RampShape::Linear] {
            let g = GradualSchedule {
                start_step: 10,
                end_step: 90,
                shape,
            };
            let r: Vec<f64> = (0..120).map(|t| g.progress(t)).collect();
            assert!(r.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn reg_error_examples() {
        assert!((regularization_error(&[0.2, 0.4], 10, 0.02).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(regularization_error(&[0.5], 2, 0.25).unwrap(), 0.0);
        assert!(regularization_error(&[], 10, 0.02).is_err());
        assert!(regularization_error(&[0.1], 10, 0.0).is_err());
    }

    #[test]
    fn e_opt_examples() {
        let pts = [
            SweepPoint {
                pnr: 10,
                mean_e_w: 0.3,
                accuracy: 0.99,
            },
            SweepPoint {
                pnr: 1,
                mean_e_w: 0.3,
                accuracy: 0.95,
            },
        ];
        assert!((estimate_e_opt(&pts, E_OPT_BAND).unwrap().e_opt - 0.03).abs() < 1e-15);
        let tied = [
            SweepPoint {
                pnr: 10,
                mean_e_w: 0.2,
                accuracy: 0.99,
            },
            SweepPoint {
                pnr: 10,
                mean_e_w: 0.4,
                accuracy: 0.99,
            },
            SweepPoint {
                pnr: 1,
                mean_e_w: 0.4,
                accuracy: 0.90,
            },
        ];
        let est = estimate_e_opt(&tied, E_OPT_BAND).unwrap();
        assert!((est.e_opt - 0.03).abs() < 1e-15);
        assert_eq!(est.provenance, EOptProvenance::EstimatedFromSweep);
        assert!(estimate_e_opt(&[], E_OPT_BAND).is_err());
    }

    #[test]
    fn e_opt_recovers_unimodal_peak() {
        let peak: f64 = 0.012;
        let pts: Vec<SweepPoint> = (1..=60)
            .map(|i| {
                let x = i as f64 * 0.0005;
                SweepPoint {
                    pnr: 5,
                    mean_e_w: 5.0 * x,
                    accuracy: 0.99 - 40.0 * (x - peak).powi(2),
                }
            })
            .collect();
        let est = estimate_e_opt(&pts, 1e-6).unwrap();
        assert!((est.e_opt - peak).abs() < 1e-9);
    }
}
