use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform-bin layout. `range = None` picks `[−max|x|, max|x|]` from the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub bins: usize,
    pub range: Option<(f64, f64)>,
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec {
            bins: 201,
            range: Some((-2.0, 2.0)),
        }
    }
}

impl BinSpec {
    pub fn auto(bins: usize) -> Self {
        BinSpec { bins, range: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
    pub n: u64,
    pub mean: f64,
    pub variance: f64,
    pub skew: f64,
}

impl Histogram {
    /// Bins `[lo, hi)` uniformly; values equal to `hi` land in the last bin.
    pub fn build(values: &[f64], spec: BinSpec) -> Result<Histogram> {
        if spec.bins == 0 {
            return Err(Error::param("histogram needs at least one bin"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("histogram input contains non-finite values"));
        }
        let (lo, hi) = match spec.range {
            Some((lo, hi)) if hi > lo => (lo, hi),
            Some((lo, hi)) => {
                return Err(Error::param(format!("empty histogram range [{lo}, {hi}]")))
            }
            None => {
                let m = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                if m > 0.0 {
                    (-m, m)
                } else {
                    (-1.0, 1.0)
                }
            }
        };
        let width = (hi - lo) / spec.bins as f64;
        let mut counts = vec![0u64; spec.bins];
        let (mut underflow, mut overflow) = (0, 0);
        for &v in values {
            if v < lo {
                underflow += 1;
            } else if v > hi {
                overflow += 1;
            } else {
                let i = (((v - lo) / width) as usize).min(spec.bins - 1);
                counts[i] += 1;
            }
        }
        let n = values.len() as f64;
        let mean = if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / n
        };
        let (mut m2, mut m3) = (0.0, 0.0);
        for &v in values {
            let d = v - mean;
            m2 += d * d;
            m3 += d * d * d;
        }
        let variance = if values.is_empty() { 0.0 } else { m2 / n };
        let skew = if variance > 0.0 {
            (m3 / n) / variance.powf(1.5)
        } else {
            0.0
        };
        Ok(Histogram {
            lo,
            hi,
            counts,
            underflow,
            overflow,
            n: values.len() as u64,
            mean,
            variance,
            skew,
        })
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = self.bin_width();
        (self.lo + i as f64 * w, self.lo + (i + 1) as f64 * w)
    }

    /// Index of the bin that holds `x`, if inside the range.
    pub fn bin_of(&self, x: f64) -> Option<usize> {
        if x < self.lo || x > self.hi {
            return None;
        }
        Some((((x - self.lo) / self.bin_width()) as usize).min(self.counts.len() - 1))
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    /// `bin_left,bin_right,count`, with under/overflow as `-inf`/`inf` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::format(0, e.to_string());
        out.write_record(["bin_left", "bin_right", "count"])
            .map_err(io)?;
        out.write_record([
            "-inf".to_string(),
            self.lo.to_string(),
            self.underflow.to_string(),
        ])
        .map_err(io)?;
        for (i, c) in self.counts.iter().enumerate() {
            let (l, r) = self.bin_edges(i);
            out.write_record([l.to_string(), r.to_string(), c.to_string()])
                .map_err(io)?;
        }
        out.write_record([
            self.hi.to_string(),
            "inf".to_string(),
            self.overflow.to_string(),
        ])
        .map_err(io)?;
        out.flush()?;
        Ok(())
    }
}
