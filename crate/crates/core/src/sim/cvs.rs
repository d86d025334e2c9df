//! Simplified cardiovascular model with baroreflex control and external
//! fluid input.

use serde::{Deserialize, Serialize};

use super::RawState;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvsState {
    /// Stroke volume.
    pub sv: f64,
    /// Arterial pressure.
    pub pa: f64,
    /// Venous pressure.
    pub pv: f64,
    /// Baroreflex tone in `[0, 1]`.
    pub s: f64,
}

impl CvsState {
    pub fn to_array(self) -> RawState {
        [self.sv, self.pa, self.pv, self.s]
    }

    pub fn from_array(a: RawState) -> Self {
        Self {
            sv: a[0],
            pa: a[1],
            pv: a[2],
            s: a[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Cardiovascular parameter table. Only the first eleven rows enter the
/// simplified equations; the remainder belong to the full model and are
/// carried for completeness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvsParams {
    pub f_hr_max: f64,
    pub f_hr_min: f64,
    pub r_tpr_max: f64,
    pub r_tpr_min: f64,
    pub r_tpr_mod: f64,
    pub sv_mod: f64,
    pub ca: f64,
    pub cv: f64,
    pub k_width: f64,
    pub p_aset: f64,
    pub tau: f64,
    pub p0_lv: f64,
    pub r_valve: f64,
    pub k_elv: f64,
    pub v_ed0: f64,
    pub t_sys: f64,
    pub cprsw_max: f64,
    pub cprsw_min: f64,
}

impl Default for CvsParams {
    fn default() -> Self {
        Self {
            f_hr_max: 3.0,
            f_hr_min: 0.6666,
            r_tpr_max: 2.134,
            r_tpr_min: 0.5335,
            r_tpr_mod: 0.0,
            sv_mod: 0.001,
            ca: 4.0,
            cv: 111.0,
            k_width: 0.1838,
            p_aset: 70.0,
            tau: 20.0,
            p0_lv: 2.03,
            r_valve: 0.0025,
            k_elv: 0.066,
            v_ed0: 7.14,
            t_sys: 0.2666,
            cprsw_max: 103.8,
            cprsw_min: 25.9,
        }
    }
}

impl CvsParams {
    pub fn r_tpr(&self, s: f64) -> f64 {
        s * (self.r_tpr_max - self.r_tpr_min) + self.r_tpr_min + self.r_tpr_mod
    }

    pub fn f_hr(&self, s: f64) -> f64 {
        s * (self.f_hr_max - self.f_hr_min) + self.f_hr_min
    }
}

/// External fluid input `θ · exp(-(5 - t)/5)`, with `t` measured from the
/// start of the current treatment cycle.
pub fn external_input(dose: f64, t_in_cycle: f64) -> f64 {
    dose * (-(5.0 - t_in_cycle) / 5.0).exp()
}

/// Time derivative `(dSV, dPa, dPv, dS)` of the cardiovascular state.
pub fn cvs_derivative(
    state: &CvsState,
    dose: f64,
    t_in_cycle: f64,
    params: &CvsParams,
) -> Result<CvsState> {
    if !state.is_finite() || !dose.is_finite() || !t_in_cycle.is_finite() {
        return Err(Error::Divergence {
            time: t_in_cycle,
            detail: format!("non-finite CVS input: state {state:?}, dose {dose}"),
        });
    }
    let i_ext = external_input(dose, t_in_cycle);
    let r_tpr = params.r_tpr(state.s);
    let f_hr = params.f_hr(state.s);

    let d_sv = i_ext;
    let d_pa = ((state.pa - state.pv) / r_tpr - state.sv * f_hr) / params.ca;
    let d_pv = (-params.ca * d_pa + i_ext) / params.cv;
    let baro = 1.0 / (1.0 + (-params.k_width * (state.pa - params.p_aset)).exp());
    let d_s = (1.0 - baro - state.s) / params.tau;

    Ok(CvsState {
        sv: d_sv,
        pa: d_pa,
        pv: d_pv,
        s: d_s,
    })
}
