//! Uncertainty-aware counterfactual treatment selection.
//!
//! The crate simulates longitudinal patients from two ground-truth ODE
//! systems, trains differentiable counterfactual trajectory predictors on the
//! resulting observational data, and selects continuous dose trajectories by
//! gradient descent on a target-tracking objective penalised by predictive
//! variance.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod hsic;
pub mod models;
pub mod parallel;
pub mod rng;
pub mod selection;
pub mod sim;
pub mod uncertainty;

pub use error::{Error, Result};
