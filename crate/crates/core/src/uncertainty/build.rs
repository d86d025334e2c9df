use serde::{Deserialize, Serialize};

use super::{build_geometric_ensemble, CurveConfig, EnsembleHandle, Method, DEFAULT_PASSES};
use crate::models::{train, train_ensemble, Architecture, TrainConfig};
use crate::sim::PatientTrajectory;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    pub method: Method,
    /// Dropout passes for mc-dropout.
    pub passes: usize,
    /// Independently trained members for a deep ensemble, or curve samples
    /// for geometric ensembling.
    pub members: usize,
    pub curve: CurveConfig,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            method: Method::McDropout,
            passes: DEFAULT_PASSES,
            members: DEFAULT_PASSES,
            curve: CurveConfig::default(),
        }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes < 2 || self.members < 2 {
            return Err(Error::Config(format!(
                "uncertainty.passes and uncertainty.members must be >= 2, got {} and {}",
                self.passes, self.members
            )));
        }
        if self.curve.epochs == 0 || self.curve.batch_size == 0 || !(self.curve.lr > 0.0) {
            return Err(Error::Config("uncertainty.curve needs positive epochs, batch_size and lr".into()));
        }
        Ok(())
    }
}

/// Trains whatever `config.method` needs and wraps it in a handle.
///
/// Every model seed derives from `train_cfg.seed`; `workers` bounds
/// concurrent member training.
pub fn build_handle(
    config: &UncertaintyConfig,
    arch: Architecture,
    train_set: &[PatientTrajectory],
    val_set: &[PatientTrajectory],
    train_cfg: &TrainConfig,
    workers: usize,
) -> Result<EnsembleHandle> {
    config.validate()?;
    match config.method {
        Method::McDropout => {
            let trained = train(arch, train_set, val_set, train_cfg)?;
            EnsembleHandle::mc_dropout(trained.model, config.passes)
        }
        Method::Ensemble => {
            let members = train_ensemble(arch, train_set, val_set, train_cfg, config.members, workers)?;
            EnsembleHandle::ensemble(members.into_iter().map(|m| m.model).collect())
        }
        Method::Geometric => {
            let ends = train_ensemble(arch, train_set, val_set, train_cfg, 2, workers)?;
            let curve = CurveConfig {
                seed: rng::derive_seed(train_cfg.seed, &[0xc0e5, config.curve.seed]),
                ..config.curve.clone()
            };
            let (handle, _) = build_geometric_ensemble(&ends[0].model, &ends[1].model, train_set, &curve, config.members)?;
            Ok(handle)
        }
    }
}
