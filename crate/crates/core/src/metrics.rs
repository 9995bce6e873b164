//! Depth-completion error metrics over ground-truth-valid pixels.

use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse_mm: f64,
    pub mae_mm: f64,
    pub irmse_per_km: f64,
    pub imae_per_km: f64,
    pub rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub valid_count: usize,
}

/// Running sums; lets several images be pooled into one report.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricAccumulator {
    sq: f64,
    abs: f64,
    inv_sq: f64,
    inv_abs: f64,
    rel: f64,
    hits: [usize; 3],
    count: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, pred: &DepthMap, gt: &DepthMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::shape("metrics", format!("pred {}x{} vs gt {}x{}", pred.height(), pred.width(), gt.height(), gt.width())));
        }
        for y in 0..gt.height() {
            for x in 0..gt.width() {
                let Some(g) = gt.get(y, x) else { continue };
                let p = pred
                    .get(y, x)
                    .ok_or_else(|| Error::InvalidData(format!("prediction invalid at ({y}, {x}) where ground truth is valid")))?;
                let e = p - g;
                self.sq += e * e;
                self.abs += e.abs();
                let ie = 1e6 / p - 1e6 / g;
                self.inv_sq += ie * ie;
                self.inv_abs += ie.abs();
                self.rel += e.abs() / g;
                let ratio = (g / p).max(p / g);
                for (i, tau) in [1.25, 1.25f64.powi(2), 1.25f64.powi(3)].into_iter().enumerate() {
                    if ratio < tau {
                        self.hits[i] += 1;
                    }
                }
                self.count += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MetricReport> {
        if self.count == 0 {
            return Err(Error::EmptyInput("ground truth has no valid pixels".into()));
        }
        let n = self.count as f64;
        let pct = |h: usize| 100.0 * h as f64 / n;
        Ok(MetricReport {
            rmse_mm: (self.sq / n).sqrt(),
            mae_mm: self.abs / n,
            irmse_per_km: (self.inv_sq / n).sqrt(),
            imae_per_km: self.inv_abs / n,
            rel: self.rel / n,
            delta1: pct(self.hits[0]),
            delta2: pct(self.hits[1]),
            delta3: pct(self.hits[2]),
            valid_count: self.count,
        })
    }
}

/// Metrics of a dense prediction against (semi-)dense ground truth.
pub fn metrics(pred: &DepthMap, gt: &DepthMap) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    acc.add(pred, gt)?;
    acc.report()
}
