//! Ground-truth evaluation of selected treatments and the experiment sweeps
//! built on it.
//!
//! A selection is scored by re-simulating the patient from the hidden state
//! at the end of the observation window under the selected doses. Two errors
//! are reported: the model's predicted mean against that counterfactual
//! (`rmse_selection`) and the counterfactual against the target
//! (`rmse_target`).

mod report;
mod sweep;

use serde::{Deserialize, Serialize};

use crate::data::{policy_center, Dataset, DosePolicyConfig};
use crate::models::History;
use crate::selection::{select_treatment, ConstraintKind, EncodedHandle, SelectionConfig, SelectionResult};
use crate::sim::{simulate_segment, PatientTrajectory, SimParams, System, TimeGrid};
use crate::uncertainty::{EnsembleHandle, Method};
use crate::{Error, Result};

pub use report::{
    curves_svg, deferral_curve, mean_stderr, read_records, summarize, write_curves_svg, write_deferral, write_records, write_summary,
    DeferralPoint, RecordSink, SummaryRow, DEFAULT_PERCENTILES,
};
pub use sweep::{
    encoder_hsic, run_confounding_sweep, run_lambda_sweep, selection_seed, ConfoundingResult, ConfoundingRow, SweepPlan, SweepSpec,
    DEFAULT_LAMBDAS,
};

/// One selection scored against the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub dataset: System,
    pub method: Method,
    pub constraint: ConstraintKind,
    pub lambda: f64,
    pub replicate: usize,
    pub patient: usize,
    pub rmse_selection: f64,
    pub rmse_target: f64,
    pub mean_variance: f64,
}

/// Cell coordinates shared by every record of one sweep job.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTag {
    pub method: Method,
    pub constraint: ConstraintKind,
    pub lambda: f64,
    pub replicate: usize,
}

/// Everything needed to re-simulate patients of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalContext {
    pub system: System,
    pub grid: TimeGrid,
    pub params: SimParams,
    pub policy: DosePolicyConfig,
}

impl EvalContext {
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self {
            system: ds.config.system,
            grid: ds.config.grid,
            params: ds.config.params.clone(),
            policy: ds.config.policy.clone(),
        }
    }

    /// Outcomes `Ȳ[t+1..=t+τ]` under horizon doses `a`, simulated from the
    /// hidden state at `t`.
    pub fn counterfactual(&self, patient: &PatientTrajectory, a: &[f64]) -> Result<Vec<f64>> {
        if a.len() != self.grid.n_horizon {
            return Err(Error::invalid(format!(
                "expected {} horizon doses, got {}",
                self.grid.n_horizon,
                a.len()
            )));
        }
        let t = self.grid.t_index();
        let start = patient.hidden_state(t)?;
        let states = simulate_segment(self.system, start, t, a, &self.grid, &self.params)?;
        let oi = self.system.outcome_index();
        Ok(states.iter().map(|s| s[oi]).collect())
    }

    /// Dose the observational policy would apply at the start of the
    /// horizon, reconstructed from observed outcomes.
    pub fn policy_dose(&self, patient: &PatientTrajectory) -> f64 {
        let t = self.grid.t_index();
        policy_center(patient, &self.grid, &self.policy, self.system, t) * self.policy.dose_scale
    }
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let sse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sse / a.len() as f64).sqrt()
}

/// Scores `result` against the re-simulated counterfactual of `patient`.
pub fn evaluate_selection(
    ctx: &EvalContext,
    result: &SelectionResult,
    patient: &PatientTrajectory,
    patient_id: usize,
    target: &[f64],
    tag: CellTag,
) -> Result<EvalRecord> {
    let truth = ctx.counterfactual(patient, &result.a_star)?;
    if target.len() != truth.len() {
        return Err(Error::invalid("target length differs from the horizon"));
    }
    Ok(EvalRecord {
        dataset: ctx.system,
        method: tag.method,
        constraint: tag.constraint,
        lambda: tag.lambda,
        replicate: tag.replicate,
        patient: patient_id,
        rmse_selection: rmse(&result.estimate.mu, &truth),
        rmse_target: rmse(&truth, target),
        mean_variance: result.estimate.mean_variance(),
    })
}

/// Selects a plan for one patient with the policy warm start and evaluates it.
pub fn select_and_evaluate(
    ctx: &EvalContext,
    handle: &EnsembleHandle,
    patient: &PatientTrajectory,
    patient_id: usize,
    config: &SelectionConfig,
    replicate: usize,
    seed: u64,
) -> Result<(SelectionResult, EvalRecord)> {
    let history = History::from_patient(patient, &ctx.grid);
    let source = EncodedHandle::new(handle, &history)?;
    let target = config.target_trajectory(ctx.system, ctx.grid.n_horizon);
    let result = select_treatment(&source, &target, ctx.policy_dose(patient), config, seed)?;
    let tag = CellTag {
        method: handle.method(),
        constraint: config.constraint,
        lambda: config.lambda,
        replicate,
    };
    let record = evaluate_selection(ctx, &result, patient, patient_id, &target, tag)?;
    Ok((result, record))
}
