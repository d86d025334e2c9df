//! Browser demo. Three pure operations, each with a JSON-returning
//! wasm-bindgen wrapper for `www/index.html`:
//!
//! * [`patient_curves`]: one simulated patient, with its factual horizon and
//!   the counterfactual horizon under a constant dose;
//! * [`constraint_curve`]: a dose constraint evaluated on a grid of raw values;
//! * [`policy_histogram`]: the dosing policy's θ distribution.

use ctsel::data::{generate_patient, sample_cycle_dose, DosePolicyConfig, GenerationConfig};
use ctsel::eval::EvalContext;
use ctsel::rng;
use ctsel::selection::{ConstraintKind, SelectionConfig};
use ctsel::sim::System;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curves {
    pub system: String,
    /// Grid times, observed window followed by the horizon.
    pub t: Vec<f64>,
    /// Outcome over the observed window, `t = 0..=30`.
    pub observed: Vec<f64>,
    /// Factual doses per interval, aligned with `t[1..]`.
    pub doses: Vec<f64>,
    pub factual: Vec<f64>,
    pub counterfactual: Vec<f64>,
    pub dose: f64,
}

/// Simulates patient `seed` of `system` and re-simulates its horizon under a
/// constant `dose`.
pub fn patient_curves(system: &str, seed: u64, dose: f64) -> Result<Curves, String> {
    let system: System = system.parse().map_err(|e: ctsel::Error| e.to_string())?;
    if !(0.0..=10.0).contains(&dose) {
        return Err(format!("dose must lie in [0, 10], got {dose}"));
    }
    let cfg = GenerationConfig {
        system,
        ..GenerationConfig::default()
    };
    let patient = generate_patient(&cfg, seed).map_err(|e| e.to_string())?;
    let grid = cfg.grid;
    let ctx = EvalContext {
        system,
        grid,
        params: cfg.params.clone(),
        policy: cfg.policy.clone(),
    };
    let counterfactual = ctx
        .counterfactual(&patient, &vec![dose; grid.n_horizon])
        .map_err(|e| e.to_string())?;
    let t0 = grid.t_index();
    Ok(Curves {
        system: system.to_string(),
        t: (0..grid.len()).map(|k| grid.time(k)).collect(),
        observed: (0..=t0).map(|k| patient.outcome(k)).collect(),
        doses: (1..grid.len()).map(|k| patient.treatment(k)).collect(),
        factual: patient.horizon_outcomes(&grid),
        counterfactual,
        dose,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintCurve {
    pub kind: String,
    pub raw: Vec<f64>,
    pub dose: Vec<f64>,
}

/// The constraint `kind` on `n` evenly spaced raw values in `[-span, span]`.
///
/// The grid is symmetric, so the range constraint's centring step is the
/// identity and the curve shows its clamp alone.
pub fn constraint_curve(kind: &str, alpha: f64, beta: f64, n: usize, span: f64) -> Result<ConstraintCurve, String> {
    let kind: ConstraintKind = kind.parse().map_err(|e: ctsel::Error| e.to_string())?;
    if !(2..=10_000).contains(&n) || !(span > 0.0 && span.is_finite()) {
        return Err("need 2 <= n <= 10000 points and a positive span".into());
    }
    let cfg = SelectionConfig {
        constraint: kind,
        soft_alpha: alpha,
        soft_beta: beta,
        tanh_beta: beta,
        ..SelectionConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let raw: Vec<f64> = (0..n).map(|i| -span + 2.0 * span * i as f64 / (n - 1) as f64).collect();
    let dose = cfg.constraint().map_values(&raw).map_err(|e| e.to_string())?;
    Ok(ConstraintCurve {
        kind: kind.to_string(),
        raw,
        dose,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` edges over `[0, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    /// Beta mean `α / (α + β)` for the requested centre.
    pub expected_mean: f64,
}

/// Histogram of `n` policy draws θ for centre `d_w` and shape `alpha`.
pub fn policy_histogram(alpha: f64, d_w: f64, n: usize, bins: usize, seed: u64) -> Result<Histogram, String> {
    if !(1..=1_000_000).contains(&n) || !(1..=200).contains(&bins) {
        return Err("need 1 <= n <= 1e6 samples and 1..=200 bins".into());
    }
    let policy = DosePolicyConfig {
        alpha,
        ..DosePolicyConfig::default()
    };
    policy.validate().map_err(|e| e.to_string())?;
    let mut r = rng::stream(seed, &[]);
    let mut counts = vec![0; bins];
    let mut sum = 0.0;
    for _ in 0..n {
        let theta = sample_cycle_dose(&policy, d_w, &mut r).map_err(|e| e.to_string())?;
        sum += theta;
        counts[((theta * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let beta = policy.beta_shape(d_w);
    Ok(Histogram {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        counts,
        mean: sum / n as f64,
        expected_mean: alpha / (alpha + beta),
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = patientCurves)]
pub fn patient_curves_js(system: &str, seed: u32, dose: f64) -> Result<String, JsError> {
    to_js(patient_curves(system, seed.into(), dose))
}

#[wasm_bindgen(js_name = constraintCurve)]
pub fn constraint_curve_js(kind: &str, alpha: f64, beta: f64, n: usize, span: f64) -> Result<String, JsError> {
    to_js(constraint_curve(kind, alpha, beta, n, span))
}

#[wasm_bindgen(js_name = policyHistogram)]
pub fn policy_histogram_js(alpha: f64, d_w: f64, n: usize, bins: usize, seed: u32) -> Result<String, JsError> {
    to_js(policy_histogram(alpha, d_w, n, bins, seed.into()))
}
