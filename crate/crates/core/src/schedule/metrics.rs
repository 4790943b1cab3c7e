use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CSV header, in column order.
pub const METRIC_COLUMNS: [&str; 9] = [
    "step",
    "event",
    "rate",
    "e_w",
    "reg_error",
    "delta_loss_rel",
    "delta_w",
    "train_loss",
    "test_accuracy",
];

/// One row per step that had a regularization event, an evaluation, or both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub event: bool,
    /// Pruning rate applied by the first prune rule at this event.
    pub rate: Option<f64>,
    pub e_w: Option<f64>,
    pub reg_error: Option<f64>,
    pub delta_loss_rel: Option<f64>,
    pub delta_w: Option<f64>,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
}

impl MetricRecord {
    pub fn new(step: u64, train_loss: f64) -> Self {
        MetricRecord {
            step,
            event: false,
            rate: None,
            e_w: None,
            reg_error: None,
            delta_loss_rel: None,
            delta_w: None,
            train_loss,
            test_accuracy: None,
        }
    }

    /// Combines two records for the same step; fields set in `other` win.
    pub fn merge(self, other: MetricRecord) -> MetricRecord {
        MetricRecord {
            step: self.step,
            event: self.event || other.event,
            rate: other.rate.or(self.rate),
            e_w: other.e_w.or(self.e_w),
            reg_error: other.reg_error.or(self.reg_error),
            delta_loss_rel: other.delta_loss_rel.or(self.delta_loss_rel),
            delta_w: other.delta_w.or(self.delta_w),
            train_loss: other.train_loss,
            test_accuracy: other.test_accuracy.or(self.test_accuracy),
        }
    }
}

pub fn write_metrics_csv<W: Write>(w: W, records: &[MetricRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if records.is_empty() {
        out.write_record(METRIC_COLUMNS).map_err(csv_err)?;
    }
    for r in records {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricRecord>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(csv_err))
        .collect()
}

pub fn write_metrics_jsonl<W: Write>(mut w: W, records: &[MetricRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::format(0, e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_jsonl<R: BufRead>(r: R) -> Result<Vec<MetricRecord>> {
    r.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(&line?)
                .map_err(|e| Error::format(i, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte() as usize);
    Error::format(offset, e.to_string())
}
