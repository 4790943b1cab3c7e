use serde::{Deserialize, Serialize};

use super::model::ModelGraph;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `v ← μ·v + g; w ← w − γ·v`
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    /// Bias-corrected Adam.
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::param(format!("momentum {momentum} outside [0, 1)")))
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                Err(Error::param(
                    "adam needs beta1, beta2 in [0, 1) and eps > 0",
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Per-parameter moment buffers, laid out in `ModelGraph` parameter order.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, model: &ModelGraph) -> Result<Self> {
        kind.validate()?;
        let zeros: Vec<Vec<f64>> = model
            .layers
            .iter()
            .flat_map(|l| l.params.iter().map(|p| vec![0.0; p.len()]))
            .collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Ok(OptimizerState {
            kind,
            first: zeros,
            second,
            step: 0,
        })
    }

    /// One update with learning rate `lr` from the model's current grads.
    pub fn step(&mut self, model: &mut ModelGraph, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::param(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.step += 1;
        let mut k = 0;
        for layer in &mut model.layers {
            for (p, g) in layer.params.iter_mut().zip(&layer.grads) {
                if p.shape() != g.shape() {
                    return Err(Error::dim(format!("{}: grad shape mismatch", layer.name)));
                }
                let w = p.data_mut();
                let g = g.data();
                match self.kind {
                    OptimizerKind::Sgd { momentum } => {
                        let v = &mut self.first[k];
                        for i in 0..w.len() {
                            v[i] = momentum * v[i] + g[i];
                            w[i] -= lr * v[i];
                        }
                    }
                    OptimizerKind::Adam { beta1, beta2, eps } => {
                        let t = self.step as i32;
                        let c1 = 1.0 - beta1.powi(t);
                        let c2 = 1.0 - beta2.powi(t);
                        let (m, v) = (&mut self.first[k], &mut self.second[k]);
                        for i in 0..w.len() {
                            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                            let mh = m[i] / c1;
                            let vh = v[i] / c2;
                            w[i] -= lr * mh / (vh.sqrt() + eps);
                        }
                    }
                }
                k += 1;
            }
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: `(first_step, rate)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub steps: Vec<LrStep>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    pub from_step: u64,
    pub lr: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            steps: vec![LrStep { from_step: 0, lr }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::param("learning-rate schedule is empty"));
        }
        if self.steps[0].from_step != 0 {
            return Err(Error::param("learning-rate schedule must start at step 0"));
        }
        if self
            .steps
            .windows(2)
            .any(|w| w[1].from_step <= w[0].from_step)
        {
            return Err(Error::param(
                "learning-rate thresholds must be strictly increasing",
            ));
        }
        if self
            .steps
            .iter()
            .any(|s| !(s.lr > 0.0) || !s.lr.is_finite())
        {
            return Err(Error::param("learning rates must be positive"));
        }
        Ok(())
    }

    /// Rate in effect for (1-based) step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        let t0 = t.saturating_sub(1);
        self.steps
            .iter()
            .rev()
            .find(|s| s.from_step <= t0)
            .map_or(self.steps[0].lr, |s| s.lr)
    }
}
