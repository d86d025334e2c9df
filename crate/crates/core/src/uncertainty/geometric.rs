//! Quadratic Bezier curves between two trained networks.
//!
//! `w(t) = (1−t)² w_a + 2t(1−t) θ + t² w_b`. Only the control point θ is
//! trained, on the expected loss over `t ~ U(0,1)`; its gradient is the
//! weight gradient at `w(t)` scaled by `2t(1−t)`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{EnsembleHandle, Method};
use crate::autodiff::{AdamW, AdamWConfig, Tensor};
use crate::models::{loss_and_grad, prepare_all, Architecture, Prepared, SurrogateModel};
use crate::sim::PatientTrajectory;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BezierCurve {
    arch: Architecture,
    a: Vec<Tensor>,
    mid: Vec<Tensor>,
    b: Vec<Tensor>,
}

fn combine(parts: &[(&[Tensor], f64)]) -> Vec<Tensor> {
    (0..parts[0].0.len())
        .map(|k| {
            let mut out = Tensor::zeros(parts[0].0[k].shape());
            for (w, c) in parts {
                for (o, v) in out.data_mut().iter_mut().zip(w[k].data()) {
                    *o += c * v;
                }
            }
            out
        })
        .collect()
}

impl BezierCurve {
    /// Curve with the control point at the endpoints' average.
    pub fn new(a: &SurrogateModel, b: &SurrogateModel) -> Result<Self> {
        if a.arch() != b.arch() {
            return Err(Error::Architecture("curve endpoints differ in architecture".into()));
        }
        Ok(Self {
            arch: *a.arch(),
            a: a.weights().to_vec(),
            mid: combine(&[(a.weights(), 0.5), (b.weights(), 0.5)]),
            b: b.weights().to_vec(),
        })
    }

    pub fn control_point(&self) -> &[Tensor] {
        &self.mid
    }

    pub fn weights_at(&self, t: f64) -> Vec<Tensor> {
        let s = 1.0 - t;
        combine(&[(&self.a, s * s), (&self.mid, 2.0 * t * s), (&self.b, t * t)])
    }

    pub fn model_at(&self, t: f64) -> Result<SurrogateModel> {
        SurrogateModel::from_weights(self.arch, self.weights_at(t))
    }

    /// Trains the control point; returns the mean batch loss per epoch.
    pub fn fit(&mut self, train: &[Prepared], config: &CurveConfig) -> Result<Vec<f64>> {
        if train.is_empty() || config.epochs == 0 || config.batch_size == 0 {
            return Err(Error::invalid("curve fitting needs data, epochs and a batch size"));
        }
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: config.lr,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            self.mid.len(),
        );
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut curve = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng::stream(config.seed, &[0xc0e, epoch as u64]));
            let mut sum = 0.0;
            let mut n = 0;
            for (b, idx) in order.chunks(config.batch_size).enumerate() {
                let mut r = rng::stream(config.seed, &[0xc0f, epoch as u64, b as u64]);
                let t: f64 = r.random();
                let batch: Vec<&Prepared> = idx.iter().map(|&i| &train[i]).collect();
                let loss = loss_and_grad(&self.arch, &self.weights_at(t), &batch, 0.0, &mut r).map_err(|e| {
                    Error::Training {
                        epoch,
                        batch: b,
                        msg: e.to_string(),
                    }
                })?;
                let scale = 2.0 * t * (1.0 - t);
                let grads: Vec<Tensor> = loss.grads.iter().map(|g| g.scaled(scale)).collect();
                let mut refs: Vec<&mut Tensor> = self.mid.iter_mut().collect();
                opt.step(&mut refs, &grads)?;
                sum += loss.total;
                n += 1;
            }
            curve.push(sum / n as f64);
        }
        Ok(curve)
    }

    /// `n` models at `t = i/(n−1)`, endpoints included.
    pub fn sample(&self, n: usize) -> Result<Vec<SurrogateModel>> {
        if n < 2 {
            return Err(Error::invalid("a curve sample needs at least 2 points"));
        }
        (0..n).map(|i| self.model_at(i as f64 / (n - 1) as f64)).collect()
    }
}

/// Fits a curve between two members and samples `n_samples` models from it.
pub fn build_geometric_ensemble(
    member_a: &SurrogateModel,
    member_b: &SurrogateModel,
    train_set: &[PatientTrajectory],
    config: &CurveConfig,
    n_samples: usize,
) -> Result<(EnsembleHandle, BezierCurve)> {
    let mut curve = BezierCurve::new(member_a, member_b)?;
    let prepared = prepare_all(train_set, member_a.arch())?;
    curve.fit(&prepared, config)?;
    let handle = EnsembleHandle::new(Method::Geometric, curve.sample(n_samples)?, n_samples)?;
    Ok((handle, curve))
}
