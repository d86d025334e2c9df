//! Ground-truth dynamics for the cardiovascular (CVS) and COVID-19 systems.
//!
//! Both systems have four state components and are integrated with a
//! fixed-step classical Runge-Kutta scheme on a uniform observation grid.
//! Doses are piecewise constant over each observation interval.

mod covid;
mod cvs;
mod grid;
mod rk4;
mod trajectory;

pub use covid::{covid_derivative, CovidParams, CovidState, DrugCoupling};
pub use cvs::{cvs_derivative, CvsParams, CvsState};
pub use grid::TimeGrid;
pub use rk4::rk4_step;
pub use trajectory::{simulate_segment, simulate_trajectory, DoseSchedule, PatientTrajectory};
pub(crate) use trajectory::assemble as trajectory_from_states;

use serde::{Deserialize, Serialize};

/// Which ground-truth system generates a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Cvs,
    Covid,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::Cvs => "cvs",
            System::Covid => "covid",
        }
    }

    /// Index of the outcome channel inside the raw state vector.
    ///
    /// CVS reports venous pressure `P_v`, COVID reports disease level `Z1`.
    pub fn outcome_index(self) -> usize {
        match self {
            System::Cvs => 2,
            System::Covid => 0,
        }
    }

    /// Indices of the state components exported as observed covariates.
    pub fn covariate_indices(self) -> [usize; 3] {
        match self {
            System::Cvs => [0, 1, 3],
            System::Covid => [1, 2, 3],
        }
    }
}

impl std::str::FromStr for System {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "cvs" => Ok(System::Cvs),
            "covid" => Ok(System::Covid),
            other => Err(crate::Error::invalid(format!(
                "unknown dataset `{other}` (expected `cvs` or `covid`)"
            ))),
        }
    }
}

impl std::fmt::Display for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Parameters of both simulators. Defaults are the published parameter tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub cvs: CvsParams,
    pub covid: CovidParams,
    pub drug_coupling: DrugCoupling,
}

/// Raw four-component state shared by both systems.
pub type RawState = [f64; 4];
