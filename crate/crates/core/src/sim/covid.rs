//! COVID-19 disease progression / immune response model with a drug
//! compartment.

use serde::{Deserialize, Serialize};

use super::RawState;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovidState {
    /// Disease progression.
    pub z1: f64,
    /// Immune reaction.
    pub z2: f64,
    /// Immunity.
    pub z3: f64,
    /// Drug concentration.
    pub z4: f64,
}

impl CovidState {
    pub fn to_array(self) -> RawState {
        [self.z1, self.z2, self.z3, self.z4]
    }

    pub fn from_array(a: RawState) -> Self {
        Self {
            z1: a[0],
            z2: a[1],
            z3: a[2],
            z4: a[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovidParams {
    /// Listed in the parameter table but absent from the dynamics.
    pub hill_cure: f64,
    pub h_p: f64,
    pub k_cp: f64,
    pub k_ep: f64,
    pub k_d: f64,
    pub k_dp: f64,
    pub k_dr: f64,
    pub k_di: f64,
    pub k_id: f64,
    pub k_if: f64,
    pub k_io: f64,
    pub k_im: f64,
    pub k_kel: f64,
}

impl Default for CovidParams {
    fn default() -> Self {
        Self {
            hill_cure: 2.0,
            h_p: 2.0,
            k_cp: 1.0,
            k_ep: 1.0,
            k_d: 1.0,
            k_dp: 1.0,
            k_dr: 1.0,
            k_di: 1.0,
            k_id: 1.0,
            k_if: 1.0,
            k_io: 1.0,
            k_im: 1.0,
            k_kel: 1.0,
        }
    }
}

/// How the drug compartment `Z4` acts on the disease dynamics.
///
/// `AsPrinted` uses immunity `Z3` in the `k_di` and `k_d` interaction terms,
/// which leaves the drug without any downstream effect. `Z4Substitution`
/// uses the drug concentration in those two terms instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DrugCoupling {
    AsPrinted,
    #[default]
    Z4Substitution,
}

/// Hill activation `k_ep · Z2^h / (k_cp^h + Z2^h)`.
pub fn hill(z2: f64, params: &CovidParams) -> f64 {
    let num = z2.powf(params.h_p);
    params.k_ep * num / (params.k_cp.powf(params.h_p) + num)
}

/// Time derivative `(dZ1, dZ2, dZ3, dZ4)` given the administered dose `C(t)`.
pub fn covid_derivative(
    state: &CovidState,
    dose_input: f64,
    params: &CovidParams,
    coupling: DrugCoupling,
) -> Result<CovidState> {
    let arr = state.to_array();
    if arr.iter().any(|v| !v.is_finite()) || !dose_input.is_finite() {
        return Err(Error::Divergence {
            time: f64::NAN,
            detail: format!("non-finite COVID input: state {state:?}, dose {dose_input}"),
        });
    }
    if arr.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid(format!(
            "COVID state components must be non-negative, got {state:?}"
        )));
    }
    let CovidState { z1, z2, z3, z4 } = *state;
    let p = params;
    let inhibitor = match coupling {
        DrugCoupling::AsPrinted => z3,
        DrugCoupling::Z4Substitution => z4,
    };

    let d1 = p.k_dp * z1 - p.k_di * z1 * inhibitor - p.k_dr * z1 * z2;
    let d2 = p.k_id * z1 - p.k_io * z2 + p.k_if * z1 * z2 + hill(z2, p) - p.k_d * inhibitor * z2;
    let d3 = p.k_im * z2;
    let d4 = p.k_kel * dose_input - p.k_kel * z4;
    Ok(CovidState {
        z1: d1,
        z2: d2,
        z3: d3,
        z4: d4,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_a_fixed_point() {
        let s = CovidState::from_array([0.0; 4]);
        let d = covid_derivative(&s, 0.0, &CovidParams::default(), DrugCoupling::default()).unwrap();
        assert_eq!(d.to_array(), [0.0; 4]);
    }

    #[test]
    fn hill_term_is_half_at_half_saturation() {
        let p = CovidParams::default();
        assert_eq!(hill(p.k_cp, &p), p.k_ep / 2.0);
    }

    #[test]
    fn unit_state_derivative() {
        // dZ1 = 1 - 1 - 1, dZ2 = 1 - 1 + 1 + 1/2 - 1, dZ3 = 1, dZ4 = 1 - 1.
        let s = CovidState::from_array([1.0; 4]);
        for coupling in [DrugCoupling::AsPrinted, DrugCoupling::Z4Substitution] {
            let d = covid_derivative(&s, 1.0, &CovidParams::default(), coupling).unwrap();
            assert_eq!(d.to_array(), [-1.0, 0.5, 1.0, 0.0]);
        }
    }

    #[test]
    fn couplings_differ_only_through_the_inhibitor() {
        let s = CovidState::from_array([0.3, 0.4, 2.0, 0.7]);
        let p = CovidParams::default();
        let printed = covid_derivative(&s, 0.5, &p, DrugCoupling::AsPrinted).unwrap();
        let sub = covid_derivative(&s, 0.5, &p, DrugCoupling::Z4Substitution).unwrap();
        assert!((printed.z1 - (0.3 - 0.3 * 2.0 - 0.3 * 0.4)).abs() < 1e-15);
        assert!((sub.z1 - (0.3 - 0.3 * 0.7 - 0.3 * 0.4)).abs() < 1e-15);
        assert_eq!(printed.z3, sub.z3);
        assert_eq!(printed.z4, sub.z4);
    }

    #[test]
    fn negative_component_is_rejected() {
        let s = CovidState::from_array([0.1, -0.1, 0.0, 0.0]);
        assert!(covid_derivative(&s, 0.0, &CovidParams::default(), DrugCoupling::default()).is_err());
    }
}
