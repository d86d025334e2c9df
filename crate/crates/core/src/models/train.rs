use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::net::{self, Dropout};
use super::{bind_weights, Architecture, Flavor, History, InstanceNorm, SurrogateModel};
use crate::autodiff::{AdamW, AdamWConfig, LeafKind, Tape, Tensor, Var};
use crate::hsic::{hsic, HsicConfig};
use crate::sim::PatientTrajectory;
use crate::{parallel, rng, Error, Result};

/// Minibatch training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the HSIC balancing term; 0 disables it entirely.
    pub hsic_weight: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            lr: 3e-3,
            weight_decay: 0.01,
            hsic_weight: 0.0,
            patience: 6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("training.epochs and training.batch_size must be positive".into()));
        }
        if !(self.hsic_weight >= 0.0 && self.hsic_weight.is_finite()) {
            return Err(Error::Config(format!(
                "training.hsic_weight must be >= 0, got {}",
                self.hsic_weight
            )));
        }
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One patient turned into normalized model inputs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub norm: InstanceNorm,
    /// Encoder rows `[x…, a, y]`, normalized, for every available step.
    pub inputs: Vec<Vec<f64>>,
    pub raw_y: Vec<f64>,
    pub treatments: Vec<f64>,
}

impl Prepared {
    pub fn from_history(history: &History, arch: &Architecture) -> Result<Self> {
        history.validate(arch)?;
        Self::build(history, &history.x, &history.a, &history.y, arch)
    }

    /// Observed window plus factual horizon; statistics use the window only.
    pub fn from_patient(patient: &PatientTrajectory, arch: &Architecture) -> Result<Self> {
        let total = arch.n_obs + arch.tau;
        if patient.len() < total {
            return Err(Error::invalid(format!(
                "patient {} has {} steps, model needs {total}",
                patient.seed,
                patient.len()
            )));
        }
        let n = arch.n_obs;
        let history = History {
            y: patient.y[..n].iter().map(|r| r[0]).collect(),
            a: patient.a[..n].iter().map(|r| r[0]).collect(),
            x: patient.x[..n].to_vec(),
        };
        history.validate(arch)?;
        let y: Vec<f64> = patient.y[..total].iter().map(|r| r[0]).collect();
        let a: Vec<f64> = patient.a[..total].iter().map(|r| r[0]).collect();
        Self::build(&history, &patient.x[..total], &a, &y, arch)
    }

    fn build(history: &History, x: &[Vec<f64>], a: &[f64], y: &[f64], arch: &Architecture) -> Result<Self> {
        let norm = InstanceNorm::fit(history, arch.revin)?;
        let inputs = x
            .iter()
            .zip(a)
            .zip(y)
            .map(|((x, &a), &y)| norm.input_row(x, a, y))
            .collect();
        Ok(Self {
            norm,
            inputs,
            raw_y: y.to_vec(),
            treatments: a.to_vec(),
        })
    }

    fn y_norm(&self, k: usize) -> f64 {
        *self.inputs[k].last().expect("non-empty row")
    }
}

fn matrix(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Result<Tensor> {
    Tensor::matrix(rows, cols, (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|(i, j)| f(i, j)).collect())
}

/// Loss of one batch, with its parts.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: f64,
    pub mse: f64,
    pub hsic: Option<f64>,
    pub grads: Vec<Tensor>,
}

/// Teacher-forced training loss and its gradient with respect to `weights`.
///
/// The HSIC term pairs the first horizon dose with the encoder state at the
/// end of the observed window; it is skipped when `hsic_weight` is 0 or the
/// batch has fewer than 4 patients.
pub fn loss_and_grad(
    arch: &Architecture,
    weights: &[Tensor],
    batch: &[&Prepared],
    hsic_weight: f64,
    rng: &mut rng::Rng,
) -> Result<BatchLoss> {
    let tape = Tape::new();
    let params = bind_weights(&tape, weights, LeafKind::Weight);
    let (mse, h_t) = teacher_forced_mse(arch, &tape, &params, batch, Dropout::Shared(rng))?;
    let mut total = mse;
    let mut hsic_value = None;
    if hsic_weight > 0.0 && batch.len() >= 4 {
        let a = Tensor::column(&batch.iter().map(|p| p.treatments[arch.n_obs]).collect::<Vec<_>>());
        let term = hsic(tape.constant(a), h_t, &HsicConfig::default())?;
        hsic_value = Some(term.item());
        total = total.add(term.scale(hsic_weight)?)?;
    }
    let grads = tape.backward(total)?;
    Ok(BatchLoss {
        total: total.item(),
        mse: mse.item(),
        hsic: hsic_value,
        grads: params.iter().map(|&p| grads.wrt(p)).collect(),
    })
}

fn teacher_forced_mse<'t>(
    arch: &Architecture,
    tape: &'t Tape,
    params: &[Var<'t>],
    batch: &[&Prepared],
    mut dropout: Dropout<'_>,
) -> Result<(Var<'t>, Var<'t>)> {
    let (b, n, tau) = (batch.len(), arch.n_obs, arch.tau);
    match arch.flavor {
        Flavor::CrnLite => {
            let h = net::encode(arch, tape, params, batch, n)?;
            let y_last = tape.constant(Tensor::column(
                &batch.iter().map(|p| p.y_norm(n - 1)).collect::<Vec<_>>(),
            ));
            let a = tape.constant(matrix(b, tau, |i, j| batch[i].treatments[n + j])?);
            let target = tape.constant(matrix(b, tau, |i, j| batch[i].y_norm(n + j))?);
            let out = net::horizon(arch, tape, params, h, y_last, a, Some(target), dropout)?;
            // raw-unit error: (σ·ŷ + m) − (σ·y + m) = σ·(ŷ − y)
            let scale = tape.constant(Tensor::column(
                &batch.iter().map(|p| p.norm.y.std * p.norm.y.std).collect::<Vec<_>>(),
            ));
            Ok((out.sub(target)?.square()?.mul(scale)?.mean()?, h))
        }
        Flavor::GnetLite => {
            let steps = n + tau - 1;
            let states = net::encoder_states(arch, tape, params, batch, steps)?;
            let width = arch.d_x + 1;
            let mut outs = Vec::with_capacity(steps);
            for (k, &h) in states.iter().enumerate() {
                let a = tape.constant(Tensor::column(
                    &batch.iter().map(|p| p.treatments[k + 1]).collect::<Vec<_>>(),
                ));
                outs.push(net::gnet_head(arch, tape, params, h, a, &mut dropout)?);
            }
            let pred = tape.concat(&outs)?;
            // next-step targets in head layout [x…, y]
            let target = matrix(b, steps * width, |i, j| {
                let row = &batch[i].inputs[j / width + 1];
                let c = j % width;
                if c < arch.d_x {
                    row[c]
                } else {
                    row[arch.d_x + 1]
                }
            })?;
            let scale = matrix(b, steps * width, |i, j| {
                let c = j % width;
                let std = if c < arch.d_x { batch[i].norm.x[c].std } else { batch[i].norm.y.std };
                std * std
            })?;
            let mse = pred
                .sub(tape.constant(target))?
                .square()?
                .mul(tape.constant(scale))?
                .mean()?;
            Ok((mse, states[n - 1]))
        }
    }
}

/// Deterministic teacher-forced MSE of `weights` over `patients`.
pub fn teacher_forced_loss(arch: &Architecture, weights: &[Tensor], patients: &[Prepared]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in patients.chunks(256) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        let tape = Tape::new();
        let params = bind_weights(&tape, weights, LeafKind::Constant);
        let (mse, _) = teacher_forced_mse(arch, &tape, &params, &refs, Dropout::Off)?;
        total += mse.item() * chunk.len() as f64;
    }
    Ok(total / patients.len() as f64)
}

/// Units for [`rollout_mse`] and [`persistence_mse`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Units {
    Normalized,
    Raw,
}

/// Deterministic autoregressive horizon MSE on factual treatments.
pub fn rollout_mse(model: &SurrogateModel, patients: &[Prepared], units: Units) -> Result<f64> {
    let arch = model.arch();
    let (n, tau) = (arch.n_obs, arch.tau);
    let mut total = 0.0;
    for chunk in patients.chunks(256) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        let tape = Tape::new();
        let params = model.bind(&tape, LeafKind::Constant);
        let h = net::encode(arch, &tape, &params, &refs, n)?;
        let y_last = tape.constant(Tensor::column(&refs.iter().map(|p| p.y_norm(n - 1)).collect::<Vec<_>>()));
        let a = tape.constant(matrix(refs.len(), tau, |i, j| refs[i].treatments[n + j])?);
        let out = net::horizon(arch, &tape, &params, h, y_last, a, None, Dropout::Off)?.value();
        for (i, p) in chunk.iter().enumerate() {
            for j in 0..tau {
                let pred = out.get(i, j);
                let err = match units {
                    Units::Normalized => pred - p.y_norm(n + j),
                    Units::Raw => p.norm.y.denormalize(pred) - p.raw_y[n + j],
                };
                total += err * err;
            }
        }
    }
    Ok(total / (patients.len() * tau) as f64)
}

/// Horizon MSE of carrying the last observed outcome forward.
pub fn persistence_mse(patients: &[Prepared], arch: &Architecture, units: Units) -> f64 {
    let (n, tau) = (arch.n_obs, arch.tau);
    let total: f64 = patients
        .iter()
        .map(|p| {
            (0..tau)
                .map(|j| match units {
                    Units::Normalized => (p.y_norm(n - 1) - p.y_norm(n + j)).powi(2),
                    Units::Raw => (p.raw_y[n - 1] - p.raw_y[n + j]).powi(2),
                })
                .sum::<f64>()
        })
        .sum();
    total / (patients.len() * tau) as f64
}

/// Per-epoch losses of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    /// Mean teacher-forced batch loss per epoch.
    pub train: Vec<f64>,
    /// Raw-unit rollout MSE on the validation split per epoch.
    pub val: Vec<f64>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: SurrogateModel,
    pub curves: LossCurves,
}

pub fn prepare_all(patients: &[PatientTrajectory], arch: &Architecture) -> Result<Vec<Prepared>> {
    patients.iter().map(|p| Prepared::from_patient(p, arch)).collect()
}

/// Minibatch AdamW training with validation early stopping.
pub fn train(
    arch: Architecture,
    train_set: &[PatientTrajectory],
    val_set: &[PatientTrajectory],
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation splits"));
    }
    let train_p = prepare_all(train_set, &arch)?;
    let val_p = prepare_all(val_set, &arch)?;
    let mut model = SurrogateModel::init(arch, config.seed)?;
    let mut opt = AdamW::new(config.optimizer(), model.weights().len());
    let mut curves = LossCurves::default();
    let mut best = (f64::INFINITY, model.weights().to_vec());
    let mut order: Vec<usize> = (0..train_p.len()).collect();
    let mut stale = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(config.seed, &[0xe90c, epoch as u64]));
        let mut sum = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Prepared> = idx.iter().map(|&i| &train_p[i]).collect();
            let abort = |e: Error| Error::Training {
                epoch,
                batch: b,
                msg: e.to_string(),
            };
            let mut drop_rng = rng::stream(config.seed, &[0xd209, epoch as u64, b as u64]);
            let loss = loss_and_grad(&arch, model.weights(), &batch, config.hsic_weight, &mut drop_rng)
                .map_err(abort)?;
            if !loss.total.is_finite() {
                return Err(abort(Error::NonFinite("loss".into())));
            }
            let mut refs: Vec<&mut Tensor> = model.weights_mut().iter_mut().collect();
            opt.step(&mut refs, &loss.grads).map_err(abort)?;
            sum += loss.total;
            batches += 1;
        }
        let val = rollout_mse(&model, &val_p, Units::Raw)?;
        curves.train.push(sum / batches as f64);
        curves.val.push(val);
        log::debug!(
            "{} epoch {epoch}: train {:.5} val {val:.5}",
            arch.flavor,
            sum / batches as f64
        );
        if val < best.0 {
            best = (val, model.weights().to_vec());
            curves.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let model = SurrogateModel::from_weights(arch, best.1)?;
    Ok(TrainedModel { model, curves })
}

/// Trains `members` independent models; member `i` uses a seed derived from
/// `(config.seed, i)`.
pub fn train_ensemble(
    arch: Architecture,
    train_set: &[PatientTrajectory],
    val_set: &[PatientTrajectory],
    config: &TrainConfig,
    members: usize,
    workers: usize,
) -> Result<Vec<TrainedModel>> {
    parallel::map_indexed(members, workers, |i| {
        let cfg = TrainConfig {
            seed: rng::derive_seed(config.seed, &[0xe45e, i as u64]),
            ..config.clone()
        };
        train(arch, train_set, val_set, &cfg)
    })
}
