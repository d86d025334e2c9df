//! Gradient-based selection of a horizon dose plan.
//!
//! Raw parameters `u` are mapped through a constraint `v`, pushed through
//! every stochastic pass of an uncertainty source, and scored by
//! `mse_weight·mean((μ̂ − y*)²) + λ·mean(σ̂²)`. AdamW updates `u`; the best
//! iterate seen is returned.

mod constraints;

use serde::{Deserialize, Serialize};

use crate::autodiff::{adamw_step, AdamState, AdamWConfig, Tape, Tensor, Var};
use crate::models::History;
use crate::sim::System;
use crate::uncertainty::{aggregate, EnsembleHandle, HandleEncoding, Method, UncertaintyEstimate};
use crate::{rng, Error, Result};

pub use constraints::{Constraint, ConstraintKind};

/// Anything that yields differentiable `[passes, τ]` predictions.
pub trait PassSource {
    fn tau(&self) -> usize;
    fn method(&self) -> Method;
    fn n_passes(&self) -> usize;
    /// Raw-unit predictions for treatments `a` (`[1, τ]`); `seed` fixes
    /// every stochastic choice.
    fn passes<'t>(&self, tape: &'t Tape, a: Var<'t>, seed: u64) -> Result<Var<'t>>;
}

/// An ensemble handle bound to one encoded history.
pub struct EncodedHandle<'h> {
    pub handle: &'h EnsembleHandle,
    pub encoding: HandleEncoding,
}

impl<'h> EncodedHandle<'h> {
    pub fn new(handle: &'h EnsembleHandle, history: &History) -> Result<Self> {
        Ok(Self {
            handle,
            encoding: handle.encode(history)?,
        })
    }
}

impl PassSource for EncodedHandle<'_> {
    fn tau(&self) -> usize {
        self.handle.arch().tau
    }

    fn method(&self) -> Method {
        self.handle.method()
    }

    fn n_passes(&self) -> usize {
        self.handle.passes()
    }

    fn passes<'t>(&self, tape: &'t Tape, a: Var<'t>, seed: u64) -> Result<Var<'t>> {
        let params = self.handle.bind(tape);
        self.handle.passes_on_tape(tape, &params, &self.encoding, a, seed)
    }
}

/// Objective, constraint and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Uncertainty weight λ.
    pub lambda: f64,
    pub mse_weight: f64,
    pub constraint: ConstraintKind,
    pub range_lo: f64,
    pub range_hi: f64,
    pub soft_alpha: f64,
    pub soft_beta: f64,
    pub tanh_beta: f64,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Constant target outcome; `None` picks the system default.
    pub target: Option<f64>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            mse_weight: 0.02,
            constraint: ConstraintKind::Soft,
            range_lo: 0.0,
            range_hi: 1.0,
            soft_alpha: 0.01,
            soft_beta: 4.0,
            tanh_beta: 4.0,
            steps: 50,
            lr: 0.1,
            weight_decay: 0.01,
            target: None,
        }
    }
}

impl SelectionConfig {
    pub fn constraint(&self) -> Constraint {
        match self.constraint {
            ConstraintKind::Range => Constraint::Range {
                lo: self.range_lo,
                hi: self.range_hi,
            },
            ConstraintKind::Soft => Constraint::Soft {
                alpha: self.soft_alpha,
                beta: self.soft_beta,
            },
            ConstraintKind::SoftJump => Constraint::SoftJump {
                alpha: self.soft_alpha,
                beta: self.soft_beta,
            },
            ConstraintKind::Tanh => Constraint::Tanh { beta: self.tanh_beta },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("selection.lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.mse_weight >= 0.0 && self.mse_weight.is_finite()) {
            return Err(Error::Config(format!(
                "selection.mse_weight must be >= 0, got {}",
                self.mse_weight
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("selection.steps must be >= 1".into()));
        }
        if self.target.is_some_and(|t| !t.is_finite()) {
            return Err(Error::Config("selection.target must be finite".into()));
        }
        self.optimizer().validate()?;
        self.constraint().validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Default targets: venous pressure set point 0.6, or zero disease level.
    pub fn target_value(&self, system: System) -> f64 {
        self.target.unwrap_or(match system {
            System::Cvs => 0.6,
            System::Covid => 0.0,
        })
    }

    pub fn target_trajectory(&self, system: System, tau: usize) -> Vec<f64> {
        vec![self.target_value(system); tau]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected doses, `v(raw_params)`.
    pub a_star: Vec<f64>,
    pub raw_params: Vec<f64>,
    /// Objective at every iterate, including the initial one.
    pub objective_trace: Vec<f64>,
    pub best_step: usize,
    /// Estimate at `a_star` with the pass seeds of `best_step`.
    pub estimate: UncertaintyEstimate,
}

impl SelectionResult {
    pub fn best_objective(&self) -> f64 {
        self.objective_trace[self.best_step]
    }

    /// Running minimum of the objective trace.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.objective_trace
            .iter()
            .scan(f64::INFINITY, |m, &v| {
                *m = m.min(v);
                Some(*m)
            })
            .collect()
    }
}

/// Pass seed used at optimisation step `step`.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    rng::derive_seed(seed, &[0x5e1, step as u64])
}

struct Evaluation<'t> {
    loss: Var<'t>,
    a: Var<'t>,
    mu: Var<'t>,
    var: Var<'t>,
}

fn objective<'t>(
    tape: &'t Tape,
    source: &impl PassSource,
    constraint: &Constraint,
    u: Var<'t>,
    target: &Tensor,
    config: &SelectionConfig,
    seed: u64,
) -> Result<Evaluation<'t>> {
    let a = constraint.apply(u)?;
    let agg = aggregate(source.passes(tape, a, seed)?)?;
    let mse = agg.mu.sub(tape.constant(target.clone()))?.square()?.mean()?;
    let unc = agg.var.mean()?;
    let loss = mse.scale(config.mse_weight)?.add(unc.scale(config.lambda)?)?;
    Ok(Evaluation {
        loss,
        a,
        mu: agg.mu,
        var: agg.var,
    })
}

/// Objective value and its gradient with respect to the raw parameters.
pub fn objective_and_grad(
    source: &impl PassSource,
    raw: &[f64],
    target: &[f64],
    config: &SelectionConfig,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let u = tape.input(Tensor::row(raw));
    let eval = objective(&tape, source, &config.constraint(), u, &Tensor::row(target), config, seed)?;
    let g = tape.backward(eval.loss)?.wrt(u);
    Ok((eval.loss.item(), g.into_data()))
}

/// Optimises the horizon plan for one history.
///
/// `init_dose` is the dose the observational policy would apply next; the
/// raw parameters start at its preimage under the constraint.
pub fn select_treatment(
    source: &impl PassSource,
    target: &[f64],
    init_dose: f64,
    config: &SelectionConfig,
    seed: u64,
) -> Result<SelectionResult> {
    config.validate()?;
    let tau = source.tau();
    if target.len() != tau {
        return Err(Error::invalid(format!("target needs {tau} steps, got {}", target.len())));
    }
    let constraint = config.constraint();
    let target_t = Tensor::row(target);
    let opt = config.optimizer();
    let mut state = AdamState::default();
    let mut u = vec![constraint.preimage(init_dose); tau];
    let mut trace = Vec::with_capacity(config.steps + 1);
    let mut best: Option<(usize, Vec<f64>, Vec<f64>, UncertaintyEstimate)> = None;

    for step in 0..=config.steps {
        let tape = Tape::new();
        let uv = tape.input(Tensor::row(&u));
        let pass_seed = step_seed(seed, step);
        let eval = objective(&tape, source, &constraint, uv, &target_t, config, pass_seed)?;
        let loss = eval.loss.item();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "selection objective at step {step}; trace so far {trace:?}"
            )));
        }
        trace.push(loss);
        if best.as_ref().is_none_or(|(s, ..)| loss < trace[*s]) {
            let estimate = UncertaintyEstimate {
                mu: eval.mu.value().into_data(),
                var: eval.var.value().into_data(),
                n_passes: source.n_passes(),
                method: source.method(),
            };
            best = Some((step, u.clone(), eval.a.value().into_data(), estimate));
        }
        if step == config.steps {
            break;
        }
        let grad = tape.backward(eval.loss)?.wrt(uv).into_data();
        if grad.iter().all(|&g| g == 0.0) && config.lambda + config.mse_weight > 0.0 {
            log::warn!("selection step {step}: gradient vanished for every dose (constraint saturated?)");
        }
        adamw_step(&mut u, &grad, &mut state, &opt)?;
    }
    let (best_step, raw_params, a_star, estimate) = best.expect("at least one step");
    Ok(SelectionResult {
        a_star,
        raw_params,
        objective_trace: trace,
        best_step,
        estimate,
    })
}
