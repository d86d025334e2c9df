//! Reversible per-instance normalization.

use serde::{Deserialize, Serialize};

use super::History;
use crate::{Error, Result};

/// Lower bound applied to per-instance standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Mean and standard deviation of one channel over the observed window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevinStats {
    pub mean: f64,
    pub std: f64,
}

impl RevinStats {
    pub const IDENTITY: Self = Self { mean: 0.0, std: 1.0 };

    /// Population statistics of `values`, with the standard deviation floored.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "instance normalization needs at least 2 observed steps, got {}",
                values.len()
            )));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        })
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Statistics for the outcome and every covariate channel of one history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceNorm {
    pub y: RevinStats,
    pub x: Vec<RevinStats>,
}

impl InstanceNorm {
    /// Fits on `history`, or returns identity statistics when disabled.
    /// Treatments are never normalized.
    pub fn fit(history: &History, enabled: bool) -> Result<Self> {
        let d_x = history.d_x();
        if !enabled {
            return Ok(Self {
                y: RevinStats::IDENTITY,
                x: vec![RevinStats::IDENTITY; d_x],
            });
        }
        let x = (0..d_x)
            .map(|c| RevinStats::fit(&history.x.iter().map(|row| row[c]).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        Ok(Self {
            y: RevinStats::fit(&history.y)?,
            x,
        })
    }

    /// Encoder input row `[x…, a, y]` in normalized units.
    pub fn input_row(&self, x: &[f64], a: f64, y: f64) -> Vec<f64> {
        let mut row: Vec<f64> = x.iter().zip(&self.x).map(|(&v, s)| s.normalize(v)).collect();
        row.push(a);
        row.push(self.y.normalize(y));
        row
    }
}
