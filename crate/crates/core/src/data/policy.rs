//! Beta-distributed dose policy with an outcome-driven centre.
//!
//! At each cycle start a dose `θ ~ Beta(α, β)` is drawn with
//! `β = (α - 1)/d_w + 2 - α`, so the mode of the distribution sits at the
//! policy centre `d_w`. `α = 1` gives a uniform, unconfounded policy; larger
//! `α` concentrates doses around `d_w`, which tracks past outcomes.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::sim::{PatientTrajectory, System, TimeGrid};
use crate::{Error, Result};

pub const CENTER_MIN: f64 = 0.01;
pub const CENTER_MAX: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyAdjustment {
    /// Centre ×1.1 when the outcome did not fall since the previous cycle,
    /// ×0.9 otherwise.
    CovidMultiplicative,
    /// Centre stays at its initial value.
    CvsConstant,
}

impl PolicyAdjustment {
    pub fn for_system(system: System) -> Self {
        match system {
            System::Cvs => PolicyAdjustment::CvsConstant,
            System::Covid => PolicyAdjustment::CovidMultiplicative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DosePolicyConfig {
    /// Beta shape α ≥ 1; controls confounding strength.
    pub alpha: f64,
    /// Initial policy centre `d_w⁰ = A_0`.
    pub a0: f64,
    /// Physical dose per unit θ.
    pub dose_scale: f64,
    /// Centre update rule; `None` picks the rule for the simulated system.
    pub adjustment: Option<PolicyAdjustment>,
}

impl Default for DosePolicyConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            a0: 0.5,
            dose_scale: 1.0,
            adjustment: None,
        }
    }
}

impl DosePolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return Err(Error::Validation(format!("policy.alpha must be >= 1, got {}", self.alpha)));
        }
        if !(self.a0 > 0.0 && self.a0 < 1.0) {
            return Err(Error::Validation(format!("policy.a0 must lie in (0, 1), got {}", self.a0)));
        }
        if !(self.dose_scale > 0.0 && self.dose_scale.is_finite()) {
            return Err(Error::Validation(format!(
                "policy.dose_scale must be > 0, got {}",
                self.dose_scale
            )));
        }
        Ok(())
    }

    pub fn adjustment_for(&self, system: System) -> PolicyAdjustment {
        self.adjustment.unwrap_or_else(|| PolicyAdjustment::for_system(system))
    }

    /// β for the current centre.
    pub fn beta_shape(&self, d_w: f64) -> f64 {
        (self.alpha - 1.0) / d_w + 2.0 - self.alpha
    }
}

/// Draws θ ∈ (0, 1) for a cycle whose policy centre is `d_w`.
///
/// The physical dose is `θ · dose_scale`.
pub fn sample_cycle_dose<R: Rng + ?Sized>(policy: &DosePolicyConfig, d_w: f64, rng: &mut R) -> Result<f64> {
    if !(CENTER_MIN..=CENTER_MAX).contains(&d_w) {
        return Err(Error::invalid(format!(
            "policy centre {d_w} outside [{CENTER_MIN}, {CENTER_MAX}]"
        )));
    }
    let beta = policy.beta_shape(d_w);
    if !(beta > 0.0) {
        return Err(Error::invalid(format!(
            "beta shape {beta} <= 0 (alpha {}, centre {d_w})",
            policy.alpha
        )));
    }
    let dist = Beta::new(policy.alpha, beta)
        .map_err(|e| Error::invalid(format!("Beta({}, {beta}): {e}", policy.alpha)))?;
    // Rounding can land exactly on a boundary; the open interval is part of
    // the contract.
    loop {
        let theta = dist.sample(rng);
        if theta > 0.0 && theta < 1.0 {
            return Ok(theta);
        }
    }
}

/// Next policy centre after observing the outcome at the new cycle start.
pub fn update_policy_center(d_w: f64, outcome_now: f64, outcome_prev: f64, rule: PolicyAdjustment) -> f64 {
    let next = match rule {
        PolicyAdjustment::CvsConstant => d_w,
        PolicyAdjustment::CovidMultiplicative if outcome_now >= outcome_prev => d_w * 1.1,
        PolicyAdjustment::CovidMultiplicative => d_w * 0.9,
    };
    next.clamp(CENTER_MIN, CENTER_MAX)
}

/// Replays the policy centre that was in force for grid interval `interval`,
/// using only the observed outcomes up to that interval's cycle start.
pub fn policy_center(
    patient: &PatientTrajectory,
    grid: &TimeGrid,
    policy: &DosePolicyConfig,
    system: System,
    interval: usize,
) -> f64 {
    let rule = policy.adjustment_for(system);
    let steps = grid.cycle_steps();
    let mut d_w = policy.a0.clamp(CENTER_MIN, CENTER_MAX);
    let mut start = steps;
    while start <= grid.cycle_start(interval) {
        d_w = update_policy_center(d_w, patient.outcome(start), patient.outcome(start - steps), rule);
        start += steps;
    }
    d_w
}
