use serde::{Deserialize, Serialize};

use super::{
    covid_derivative, cvs_derivative, rk4_step, CovidState, CvsState, RawState, SimParams, System,
    TimeGrid,
};
use crate::{Error, Result};

/// Dose applied over each observation interval `[k, k+1)` of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DoseSchedule {
    pub per_interval: Vec<f64>,
}

impl DoseSchedule {
    /// Builds a schedule from one dose per observation-window cycle followed
    /// by one dose per horizon step.
    pub fn from_cycles(cycle_doses: &[f64], horizon: &[f64], grid: &TimeGrid) -> Result<Self> {
        if cycle_doses.len() != grid.n_cycles || horizon.len() != grid.n_horizon {
            return Err(Error::invalid(format!(
                "dose schedule needs {} cycle doses and {} horizon doses, got {} and {}",
                grid.n_cycles,
                grid.n_horizon,
                cycle_doses.len(),
                horizon.len()
            )));
        }
        let steps = grid.cycle_steps();
        let mut per_interval: Vec<f64> = cycle_doses
            .iter()
            .flat_map(|&d| std::iter::repeat_n(d, steps))
            .collect();
        per_interval.extend_from_slice(horizon);
        Ok(Self { per_interval })
    }

    pub fn horizon<'a>(&'a self, grid: &TimeGrid) -> &'a [f64] {
        &self.per_interval[grid.t_index()..]
    }

    pub fn with_horizon(&self, horizon: &[f64], grid: &TimeGrid) -> Result<Self> {
        if horizon.len() != grid.n_horizon {
            return Err(Error::invalid(format!(
                "expected {} horizon doses, got {}",
                grid.n_horizon,
                horizon.len()
            )));
        }
        let mut per_interval = self.per_interval[..grid.t_index()].to_vec();
        per_interval.extend_from_slice(horizon);
        Ok(Self { per_interval })
    }
}

/// One simulated patient on the full grid.
///
/// Every channel has one row per grid point. `a[k]` is the dose applied over
/// the interval ending at point `k` (`a[0] = 0`), so the horizon treatments
/// `a[t+1..=t+τ]` line up with the horizon outcomes `y[t+1..=t+τ]`.
/// `state` is the full simulator state and is never shown to models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTrajectory {
    pub seed: u64,
    pub y: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub state: Vec<Vec<f64>>,
}

impl PatientTrajectory {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn outcome(&self, k: usize) -> f64 {
        self.y[k][0]
    }

    pub fn treatment(&self, k: usize) -> f64 {
        self.a[k][0]
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.y.iter().map(|r| r[0]).collect()
    }

    pub fn treatments(&self) -> Vec<f64> {
        self.a.iter().map(|r| r[0]).collect()
    }

    /// Factual horizon treatments `a[t+1..=t+τ]`.
    pub fn horizon_treatments(&self, grid: &TimeGrid) -> Vec<f64> {
        (grid.t_index() + 1..grid.len()).map(|k| self.treatment(k)).collect()
    }

    /// Factual horizon outcomes `y[t+1..=t+τ]`.
    pub fn horizon_outcomes(&self, grid: &TimeGrid) -> Vec<f64> {
        (grid.t_index() + 1..grid.len()).map(|k| self.outcome(k)).collect()
    }

    pub fn hidden_state(&self, k: usize) -> Result<RawState> {
        let row = self
            .state
            .get(k)
            .ok_or_else(|| Error::invalid(format!("patient {} has no hidden state at index {k}", self.seed)))?;
        row.as_slice()
            .try_into()
            .map_err(|_| Error::invalid(format!("hidden state row {k} has {} entries, expected 4", row.len())))
    }

    /// The factual dose schedule recovered from the treatment channel.
    pub fn schedule(&self) -> DoseSchedule {
        DoseSchedule {
            per_interval: self.a.iter().skip(1).map(|r| r[0]).collect(),
        }
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        let n = grid.len();
        let lens = [self.y.len(), self.a.len(), self.x.len(), self.state.len()];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Validation(format!(
                "patient {}: channel lengths {lens:?} do not match grid length {n}",
                self.seed
            )));
        }
        let finite = [&self.y, &self.a, &self.x, &self.state]
            .iter()
            .all(|ch| ch.iter().flatten().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Validation(format!("patient {}: non-finite value", self.seed)));
        }
        Ok(())
    }
}

fn project(system: System, y: &mut RawState) {
    match system {
        System::Cvs => y[3] = y[3].clamp(0.0, 1.0),
        System::Covid => y.iter_mut().for_each(|v| *v = v.max(0.0)),
    }
}

/// Integrates `doses.len()` observation intervals starting at grid interval
/// `start_interval` from `initial`, returning the state at the end of each
/// interval.
pub fn simulate_segment(
    system: System,
    initial: RawState,
    start_interval: usize,
    doses: &[f64],
    grid: &TimeGrid,
    params: &SimParams,
) -> Result<Vec<RawState>> {
    grid.validate()?;
    if start_interval + doses.len() > grid.n_intervals() {
        return Err(Error::invalid(format!(
            "segment [{start_interval}, {}) exceeds the {} grid intervals",
            start_interval + doses.len(),
            grid.n_intervals()
        )));
    }
    let h = grid.dt / grid.substeps as f64;
    let mut y = initial;
    let mut out = Vec::with_capacity(doses.len());
    for (offset, &dose) in doses.iter().enumerate() {
        let interval = start_interval + offset;
        let t_interval = grid.time(interval);
        let t_cycle_start = grid.time(grid.cycle_start(interval));
        for sub in 0..grid.substeps {
            let t0 = t_interval + sub as f64 * h;
            let stepped = match system {
                System::Cvs => rk4_step(&y, t0, h, |t, s| {
                    let d = cvs_derivative(&CvsState::from_array(*s), dose, t - t_cycle_start, &params.cvs)
                        .map_err(|e| with_time(e, t))?;
                    Ok(d.to_array())
                }),
                System::Covid => rk4_step(&y, t0, h, |t, s| {
                    // Stages may dip below zero when a component decays fast;
                    // evaluate the rates at the projected state.
                    let mut s = *s;
                    project(System::Covid, &mut s);
                    let d = covid_derivative(
                        &CovidState::from_array(s),
                        dose,
                        &params.covid,
                        params.drug_coupling,
                    )
                    .map_err(|e| with_time(e, t))?;
                    Ok(d.to_array())
                }),
            };
            y = stepped?;
            project(system, &mut y);
        }
        out.push(y);
    }
    Ok(out)
}

fn with_time(err: Error, t: f64) -> Error {
    match err {
        Error::Divergence { detail, .. } => Error::Divergence { time: t, detail },
        other => other,
    }
}

/// Simulates a patient over the whole grid under `schedule`.
pub fn simulate_trajectory(
    system: System,
    initial: RawState,
    schedule: &DoseSchedule,
    grid: &TimeGrid,
    params: &SimParams,
    seed: u64,
) -> Result<PatientTrajectory> {
    if schedule.per_interval.len() != grid.n_intervals() {
        return Err(Error::invalid(format!(
            "dose schedule has {} intervals, grid has {}",
            schedule.per_interval.len(),
            grid.n_intervals()
        )));
    }
    if initial.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            time: 0.0,
            detail: format!("non-finite initial state {initial:?}"),
        });
    }
    let mut states = vec![initial];
    states.extend(simulate_segment(system, initial, 0, &schedule.per_interval, grid, params)?);
    Ok(assemble(system, &states, &schedule.per_interval, seed))
}

pub(crate) fn assemble(system: System, states: &[RawState], doses: &[f64], seed: u64) -> PatientTrajectory {
    let oi = system.outcome_index();
    let ci = system.covariate_indices();
    let mut a = vec![vec![0.0]];
    a.extend(doses.iter().map(|&d| vec![d]));
    PatientTrajectory {
        seed,
        y: states.iter().map(|s| vec![s[oi]]).collect(),
        a,
        x: states.iter().map(|s| ci.iter().map(|&i| s[i]).collect()).collect(),
        state: states.iter().map(|s| s.to_vec()).collect(),
    }
}
