//! Confounded observational datasets generated from the simulators.

mod dataset;
mod io;
mod policy;

pub use dataset::{
    generate_dataset, generate_patient, sample_initial_conditions, Dataset, GenerationConfig, InitialConditions,
    Split, SplitSizes,
};
pub use io::{load_dataset, save_dataset, MANIFEST_FILE, SCHEMA_VERSION};
pub use policy::{
    policy_center, sample_cycle_dose, update_policy_center, DosePolicyConfig, PolicyAdjustment,
};

pub use crate::sim::PatientTrajectory;
