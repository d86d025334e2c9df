use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Uniform observation grid: `n_obs` observed points `t = 0, dt, ..`, followed
/// by `n_horizon` prediction points. Cycles tile the observation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeGrid {
    /// Spacing between observations.
    pub dt: f64,
    /// Number of observed points, including `t = 0`.
    pub n_obs: usize,
    /// Prediction horizon length τ.
    pub n_horizon: usize,
    /// Treatment cycles across the observation window.
    pub n_cycles: usize,
    /// RK4 steps per observation interval.
    pub substeps: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self {
            dt: 1.0,
            n_obs: 31,
            n_horizon: 10,
            n_cycles: 5,
            substeps: 1,
        }
    }
}

impl TimeGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Validation(format!("grid.dt must be > 0, got {}", self.dt)));
        }
        if self.n_obs < 2 {
            return Err(Error::Validation("grid.n_obs must be at least 2".into()));
        }
        if self.n_horizon == 0 {
            return Err(Error::Validation("grid.n_horizon must be positive".into()));
        }
        if self.n_cycles == 0 || !(self.n_obs - 1).is_multiple_of(self.n_cycles) {
            return Err(Error::Validation(format!(
                "grid.n_cycles = {} must divide the {} observation intervals",
                self.n_cycles,
                self.n_obs - 1
            )));
        }
        if self.substeps == 0 {
            return Err(Error::Validation("grid.substeps must be positive".into()));
        }
        Ok(())
    }

    /// Total number of grid points (observed + horizon).
    pub fn len(&self) -> usize {
        self.n_obs + self.n_horizon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of integration intervals across the full grid.
    pub fn n_intervals(&self) -> usize {
        self.len() - 1
    }

    /// Index of the last observed point (the decision time `t`).
    pub fn t_index(&self) -> usize {
        self.n_obs - 1
    }

    /// Observation intervals per treatment cycle.
    pub fn cycle_steps(&self) -> usize {
        (self.n_obs - 1) / self.n_cycles
    }

    pub fn time(&self, index: usize) -> f64 {
        index as f64 * self.dt
    }

    /// Interval index at which the cycle containing `interval` started.
    ///
    /// The cycle clock keeps running past the observation window, so the
    /// horizon is covered by further cycles of the same length.
    pub fn cycle_start(&self, interval: usize) -> usize {
        (interval / self.cycle_steps()) * self.cycle_steps()
    }
}
