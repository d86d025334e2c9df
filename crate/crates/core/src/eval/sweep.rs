use serde::{Deserialize, Serialize};

use super::{select_and_evaluate, EvalContext, EvalRecord};
use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::hsic::{hsic_value, HsicConfig};
use crate::models::{Architecture, History, SurrogateModel, TrainConfig};
use crate::selection::{ConstraintKind, SelectionConfig};
use crate::sim::{PatientTrajectory, TimeGrid};
use crate::uncertainty::{build_handle, EnsembleHandle, Method, UncertaintyConfig};
use crate::{parallel, rng, Error, Result};

/// Uncertainty weights of the full-scale sweep.
pub const DEFAULT_LAMBDAS: [f64; 14] = [
    0.0, 1e-5, 1e-4, 1e-3, 1e-2, 0.0625, 0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub lambdas: Vec<f64>,
    pub replicates: usize,
    pub constraints: Vec<ConstraintKind>,
    pub methods: Vec<Method>,
    /// Evaluate only the first `n` test patients.
    pub test_patients: Option<usize>,
    /// Balancing weights of the confounding sweep.
    pub hsic_weights: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            replicates: 6,
            constraints: vec![ConstraintKind::Soft],
            methods: vec![Method::McDropout],
            test_patients: None,
            hsic_weights: vec![0.0, 0.1, 1.0],
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("lambdas", self.lambdas.is_empty()),
            ("constraints", self.constraints.is_empty()),
            ("methods", self.methods.is_empty()),
            ("hsic_weights", self.hsic_weights.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("sweep.{name} must not be empty")));
        }
        if self.replicates == 0 {
            return Err(Error::Config("sweep.replicates must be >= 1".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("sweep.lambdas must be >= 0, got {l}")));
        }
        if let Some(w) = self.hsic_weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("sweep.hsic_weights must be >= 0, got {w}")));
        }
        if self.test_patients == Some(0) {
            return Err(Error::Config("sweep.test_patients must be >= 1".into()));
        }
        Ok(())
    }
}

/// A fully specified experiment on one dataset.
#[derive(Debug, Clone)]
pub struct SweepPlan<'a> {
    pub dataset: &'a Dataset,
    pub arch: Architecture,
    pub training: TrainConfig,
    pub uncertainty: UncertaintyConfig,
    /// Base selection settings; λ and the constraint come from the sweep grid.
    pub selection: SelectionConfig,
    pub spec: SweepSpec,
    pub seed: u64,
    pub workers: usize,
}

impl SweepPlan<'_> {
    pub fn test_set(&self) -> &[PatientTrajectory] {
        let test = &self.dataset.test;
        &test[..self.spec.test_patients.unwrap_or(test.len()).min(test.len())]
    }

    /// Training settings of replicate `r`; the model seed depends only on
    /// the master seed and `r`.
    pub fn training_for(&self, replicate: usize) -> TrainConfig {
        TrainConfig {
            seed: rng::derive_seed(self.seed, &[0x7e91, replicate as u64]),
            ..self.training.clone()
        }
    }

    /// Trains the handle for `method` in replicate `r`.
    pub fn train_handle(&self, method: Method, replicate: usize) -> Result<EnsembleHandle> {
        let unc = UncertaintyConfig {
            method,
            ..self.uncertainty.clone()
        };
        let ds = self.dataset;
        build_handle(&unc, self.arch, &ds.train, &ds.val, &self.training_for(replicate), self.workers)
    }

    /// Selects and scores every test patient under `config`. Pass seeds are
    /// shared across λ so cells differ only in the objective.
    fn evaluate_cell(
        &self,
        handle: &EnsembleHandle,
        config: &SelectionConfig,
        replicate: usize,
    ) -> Result<Vec<EvalRecord>> {
        let ctx = EvalContext::from_dataset(self.dataset);
        let test = self.test_set();
        parallel::map_indexed(test.len(), self.workers, |i| {
            select_and_evaluate(&ctx, handle, &test[i], i, config, replicate, selection_seed(self.seed, replicate, i))
                .map(|(_, rec)| rec)
        })
    }
}

/// Pass seed for selecting `patient` in `replicate`, shared across λ so
/// cells differ only in the objective.
pub fn selection_seed(seed: u64, replicate: usize, patient: usize) -> u64 {
    rng::derive_seed(seed, &[0x5e1e, replicate as u64, patient as u64])
}

/// Runs every (method, replicate, constraint, λ) cell.
///
/// `handle_for` supplies the trained handle of a (method, replicate) pair,
/// typically [`SweepPlan::train_handle`] or a cache in front of it. `flush`
/// receives the records of each finished λ cell in order.
pub fn run_lambda_sweep(
    plan: &SweepPlan<'_>,
    handle_for: impl Fn(Method, usize) -> Result<EnsembleHandle>,
    mut flush: impl FnMut(&[EvalRecord]) -> Result<()>,
) -> Result<Vec<EvalRecord>> {
    plan.spec.validate()?;
    plan.selection.validate()?;
    let mut all = Vec::new();
    for &method in &plan.spec.methods {
        for r in 0..plan.spec.replicates {
            let handle = handle_for(method, r)?;
            if handle.method() != method {
                return Err(Error::invalid(format!(
                    "handle for {method} replicate {r} is a {} handle",
                    handle.method()
                )));
            }
            for &constraint in &plan.spec.constraints {
                for &lambda in &plan.spec.lambdas {
                    let cfg = SelectionConfig {
                        lambda,
                        constraint,
                        ..plan.selection.clone()
                    };
                    let records = plan.evaluate_cell(&handle, &cfg, r)?;
                    log::info!(
                        "{method} r{r} {constraint} λ={lambda}: mean rmse_selection {:.5}",
                        records.iter().map(|x| x.rmse_selection).sum::<f64>() / records.len() as f64
                    );
                    flush(&records)?;
                    all.extend(records);
                }
            }
        }
    }
    Ok(all)
}

/// `HSIC(a[t+1], Φ)` between the first horizon dose and the encoder state
/// at the end of the observation window.
pub fn encoder_hsic(model: &SurrogateModel, patients: &[PatientTrajectory], grid: &TimeGrid) -> Result<f64> {
    let histories: Vec<History> = patients.iter().map(|p| History::from_patient(p, grid)).collect();
    let refs: Vec<&History> = histories.iter().collect();
    let phi = model.encode(&refs)?.h;
    let t = grid.t_index();
    let doses: Vec<f64> = patients.iter().map(|p| p.treatment(t + 1)).collect();
    hsic_value(&Tensor::column(&doses), &phi, &HsicConfig::default())
}

/// Replicate-level outcome of one balancing weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfoundingRow {
    pub hsic_weight: f64,
    pub replicate: usize,
    pub rmse_selection: f64,
    pub rmse_target: f64,
    /// Measured on the training split with the trained encoder.
    pub hsic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfoundingResult {
    pub rows: Vec<ConfoundingRow>,
    pub records: Vec<EvalRecord>,
}

impl ConfoundingResult {
    /// Mean and replicate standard error of `rmse_selection` and mean HSIC
    /// per weight, in input order.
    pub fn by_weight(&self) -> Vec<(f64, f64, f64, f64)> {
        let mut weights: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !weights.contains(&r.hsic_weight) {
                weights.push(r.hsic_weight);
            }
        }
        weights
            .into_iter()
            .map(|w| {
                let rows: Vec<&ConfoundingRow> = self.rows.iter().filter(|r| r.hsic_weight == w).collect();
                let rmse: Vec<f64> = rows.iter().map(|r| r.rmse_selection).collect();
                let (m, se) = super::report::mean_stderr(&rmse);
                let h = rows.iter().map(|r| r.hsic).sum::<f64>() / rows.len() as f64;
                (w, m, se, h)
            })
            .collect()
    }
}

/// Retrains mc-dropout surrogates at every balancing weight of the spec and
/// evaluates selection at the plan's λ.
///
/// The dataset should come from a confounded policy (`α > 1`); replicate `r`
/// reuses the same model seed across weights so rows pair up.
pub fn run_confounding_sweep(plan: &SweepPlan<'_>) -> Result<ConfoundingResult> {
    plan.spec.validate()?;
    plan.selection.validate()?;
    if plan.dataset.config.policy.alpha <= 1.0 {
        log::warn!("confounding sweep on an unconfounded dataset (alpha = 1)");
    }
    let method = plan.spec.methods[0];
    let constraint = plan.spec.constraints[0];
    let cfg = SelectionConfig {
        constraint,
        ..plan.selection.clone()
    };
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &w in &plan.spec.hsic_weights {
        let weighted = SweepPlan {
            training: TrainConfig {
                hsic_weight: w,
                ..plan.training.clone()
            },
            ..plan.clone()
        };
        for r in 0..plan.spec.replicates {
            let handle = weighted.train_handle(method, r)?;
            let hsic = encoder_hsic(&handle.members()[0], &plan.dataset.train, plan.dataset.grid())?;
            let recs = weighted.evaluate_cell(&handle, &cfg, r)?;
            let n = recs.len() as f64;
            let row = ConfoundingRow {
                hsic_weight: w,
                replicate: r,
                rmse_selection: recs.iter().map(|x| x.rmse_selection).sum::<f64>() / n,
                rmse_target: recs.iter().map(|x| x.rmse_target).sum::<f64>() / n,
                hsic,
            };
            log::info!("hsic weight {w} r{r}: rmse_selection {:.5}, HSIC {:.3e}", row.rmse_selection, hsic);
            rows.push(row);
            records.extend(recs);
        }
    }
    Ok(ConfoundingResult { rows, records })
}
