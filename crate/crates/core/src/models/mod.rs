//! Differentiable counterfactual trajectory predictors.
//!
//! Two flavors share a GRU history encoder:
//!
//! * `crn-lite`: encoder/decoder. A second GRU consumes each future dose with
//!   the previous prediction and emits one outcome per horizon step.
//! * `gnet-lite`: g-computation. A one-step head predicts the next covariates
//!   and outcome, and the rollout feeds those predictions back through the
//!   encoder cell.
//!
//! Dropout is applied only after the encoder, so a history's encoding is
//! deterministic and can be reused across Monte Carlo passes.

mod io;
mod net;
mod revin;
mod train;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{LeafKind, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::sim::{PatientTrajectory, TimeGrid};
use crate::{Error, Result};

pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_SCHEMA_VERSION};
pub use net::Dropout;
pub use revin::{InstanceNorm, RevinStats, STD_FLOOR};
pub use train::{
    loss_and_grad, persistence_mse, prepare_all, rollout_mse, teacher_forced_loss, train, train_ensemble,
    BatchLoss, LossCurves, Prepared, TrainConfig, TrainedModel, Units,
};

/// Surrogate architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flavor {
    #[serde(alias = "recurrent-seq2seq")]
    CrnLite,
    #[serde(alias = "gcomp-rollout")]
    GnetLite,
}

impl Flavor {
    pub fn name(self) -> &'static str {
        match self {
            Flavor::CrnLite => "crn-lite",
            Flavor::GnetLite => "gnet-lite",
        }
    }
}

impl std::str::FromStr for Flavor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crn-lite" | "recurrent-seq2seq" => Ok(Flavor::CrnLite),
            "gnet-lite" | "gcomp-rollout" => Ok(Flavor::GnetLite),
            other => Err(Error::Config(format!(
                "unknown model flavor `{other}` (expected crn-lite or gnet-lite)"
            ))),
        }
    }
}

impl std::fmt::Display for Flavor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything needed to rebuild a model's computation graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub flavor: Flavor,
    pub hidden: usize,
    /// Covariate channels.
    pub d_x: usize,
    /// Observed steps fed to the encoder.
    pub n_obs: usize,
    /// Horizon length τ.
    pub tau: usize,
    pub dropout: f64,
    pub revin: bool,
}

impl Architecture {
    pub fn new(flavor: Flavor, grid: &TimeGrid) -> Self {
        Self {
            flavor,
            hidden: 64,
            d_x: 3,
            n_obs: grid.n_obs,
            tau: grid.n_horizon,
            dropout: 0.1,
            revin: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.d_x == 0 || self.tau == 0 || self.n_obs < 2 {
            return Err(Error::Architecture(format!("degenerate architecture {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Architecture(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Encoder input width: covariates, treatment, outcome.
    pub fn d_in(&self) -> usize {
        self.d_x + 2
    }

    /// Names and shapes of every weight tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(&'static str, [usize; 2])> {
        let h = self.hidden;
        let mut shapes = vec![
            ("enc.w_in", [self.d_in(), 3 * h]),
            ("enc.w_hid", [h, 3 * h]),
            ("enc.b_in", [1, 3 * h]),
            ("enc.b_hid", [1, 3 * h]),
        ];
        match self.flavor {
            Flavor::CrnLite => shapes.extend([
                ("dec.w_in", [2, 3 * h]),
                ("dec.w_hid", [h, 3 * h]),
                ("dec.b_in", [1, 3 * h]),
                ("dec.b_hid", [1, 3 * h]),
                ("out.w", [h, 1]),
                ("out.b", [1, 1]),
            ]),
            Flavor::GnetLite => shapes.extend([
                ("head.w1", [h + 1, h]),
                ("head.b1", [1, h]),
                ("head.w2", [h, self.d_x + 1]),
                ("head.b2", [1, self.d_x + 1]),
            ]),
        }
        shapes
    }

    pub fn n_weights(&self) -> usize {
        self.param_shapes().iter().map(|(_, [r, c])| r * c).sum()
    }

    /// Checks that `weights` match this architecture's layout.
    pub fn check_weights(&self, weights: &[Tensor]) -> Result<()> {
        let shapes = self.param_shapes();
        if weights.len() != shapes.len() {
            return Err(Error::Architecture(format!(
                "{} expects {} weight tensors, got {}",
                self.flavor,
                shapes.len(),
                weights.len()
            )));
        }
        for ((name, shape), w) in shapes.iter().zip(weights) {
            if w.shape() != shape {
                return Err(Error::Architecture(format!(
                    "weight {name} has shape {:?}, expected {shape:?}",
                    w.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Observed window of one patient, `t = 0..n_obs`.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub y: Vec<f64>,
    pub a: Vec<f64>,
    pub x: Vec<Vec<f64>>,
}

impl History {
    pub fn from_patient(patient: &PatientTrajectory, grid: &TimeGrid) -> Self {
        let n = grid.n_obs;
        Self {
            y: patient.y[..n].iter().map(|r| r[0]).collect(),
            a: patient.a[..n].iter().map(|r| r[0]).collect(),
            x: patient.x[..n].to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn last_outcome(&self) -> f64 {
        self.y[self.y.len() - 1]
    }

    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        if self.y.len() != arch.n_obs || self.a.len() != arch.n_obs || self.x.len() != arch.n_obs {
            return Err(Error::invalid(format!(
                "history must have {} steps, got y={}, a={}, x={}",
                arch.n_obs,
                self.y.len(),
                self.a.len(),
                self.x.len()
            )));
        }
        if self.x.iter().any(|r| r.len() != arch.d_x) {
            return Err(Error::invalid(format!("covariate rows must have {} channels", arch.d_x)));
        }
        let finite = self.y.iter().chain(&self.a).chain(self.x.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("history".into()));
        }
        Ok(())
    }
}

/// Cached encoder output for a batch of histories.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    /// Final encoder state, one row per history.
    pub h: Tensor,
    pub norms: Vec<InstanceNorm>,
}

impl Encoding {
    pub fn rows(&self) -> usize {
        self.norms.len()
    }

    /// Repeats a single-history encoding `n` times (one row per MC pass).
    pub fn repeat(&self, n: usize) -> Result<Self> {
        if self.rows() != 1 {
            return Err(Error::invalid("only single-history encodings can be repeated"));
        }
        let rows: Vec<&Tensor> = std::iter::repeat_n(&self.h, n).collect();
        Ok(Self {
            h: Tensor::vcat(&rows)?,
            norms: vec![self.norms[0].clone(); n],
        })
    }

    fn column(&self, f: impl Fn(&InstanceNorm) -> f64) -> Tensor {
        Tensor::column(&self.norms.iter().map(f).collect::<Vec<_>>())
    }

    /// Last observed outcome per row, normalized.
    pub(crate) fn last_y(&self, last: &[f64]) -> Tensor {
        Tensor::column(&self.norms.iter().zip(last).map(|(n, &y)| n.y.normalize(y)).collect::<Vec<_>>())
    }
}

/// A trained or freshly initialised predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    arch: Architecture,
    weights: Vec<Tensor>,
}

impl SurrogateModel {
    /// Uniform `±1/√fan` initialisation, where `fan` is the hidden size for
    /// recurrent blocks and the input width for dense layers.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = crate::rng::stream(seed, &[0x1417]);
        let weights = arch
            .param_shapes()
            .iter()
            .map(|(name, [r, c])| {
                let fan = match *name {
                    "head.w1" | "head.b1" => arch.hidden + 1,
                    _ => arch.hidden,
                };
                let bound = 1.0 / (fan as f64).sqrt();
                let data = (0..r * c).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::matrix(*r, *c, data)
            })
            .collect::<Result<_>>()?;
        Ok(Self { arch, weights })
    }

    pub fn from_weights(arch: Architecture, weights: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        arch.check_weights(&weights)?;
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("model weights".into()));
        }
        Ok(Self { arch, weights })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn flavor(&self) -> Flavor {
        self.arch.flavor
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    /// Places the weights on `tape` as leaves of the given kind.
    pub fn bind<'t>(&self, tape: &'t Tape, kind: LeafKind) -> Vec<Var<'t>> {
        bind_weights(tape, &self.weights, kind)
    }

    /// Runs the deterministic encoder over each history.
    pub fn encode(&self, histories: &[&History]) -> Result<Encoding> {
        let prepared = histories
            .iter()
            .map(|h| Prepared::from_history(h, &self.arch))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Prepared> = prepared.iter().collect();
        let tape = Tape::new();
        let params = self.bind(&tape, LeafKind::Constant);
        let h = net::encode(&self.arch, &tape, &params, &refs, self.arch.n_obs)?;
        Ok(Encoding {
            h: h.value(),
            norms: prepared.into_iter().map(|p| p.norm).collect(),
        })
    }

    /// Horizon predictions in raw outcome units, one row per encoding row.
    ///
    /// `treatments` is `[rows, τ]` or `[1, τ]` (broadcast over rows).
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        encoding: &Encoding,
        last_outcomes: &[f64],
        treatments: Var<'t>,
        dropout: Dropout<'_>,
    ) -> Result<Var<'t>> {
        let rows = encoding.rows();
        if last_outcomes.len() != rows {
            return Err(Error::invalid("one last outcome per encoding row is required"));
        }
        let shape = treatments.shape();
        if shape.len() != 2 || shape[1] != self.arch.tau || !(shape[0] == 1 || shape[0] == rows) {
            return Err(Error::ShapeMismatch {
                op: "forward treatments",
                left: shape,
                right: vec![rows, self.arch.tau],
            });
        }
        let a = if shape[0] == rows {
            treatments
        } else {
            treatments.add(tape.constant(Tensor::zeros(&[rows, self.arch.tau])))?
        };
        let h = tape.constant(encoding.h.clone());
        let y_last = tape.constant(encoding.last_y(last_outcomes));
        let norm_out = net::horizon(&self.arch, tape, params, h, y_last, a, None, dropout)?;
        let std = tape.constant(encoding.column(|n| n.y.std));
        let mean = tape.constant(encoding.column(|n| n.y.mean));
        norm_out.mul(std)?.add(mean)
    }

    /// One forward pass; dropout is active only when `rng` is given.
    pub fn predict(&self, history: &History, treatments: &[f64], rng: Option<&mut Rng>) -> Result<Vec<f64>> {
        self.check_treatments(treatments)?;
        let enc = self.encode(&[history])?;
        let tape = Tape::new();
        let params = self.bind(&tape, LeafKind::Constant);
        let a = tape.constant(Tensor::row(treatments));
        let dropout = match rng {
            Some(r) => Dropout::Shared(r),
            None => Dropout::Off,
        };
        let out = self.forward(&tape, &params, &enc, &[history.last_outcome()], a, dropout)?;
        Ok(out.value().into_data())
    }

    /// `rngs.len()` dropout-active passes batched as rows.
    pub fn predict_passes(&self, history: &History, treatments: &[f64], rngs: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
        self.check_treatments(treatments)?;
        let n = rngs.len();
        let enc = self.encode(&[history])?.repeat(n)?;
        let tape = Tape::new();
        let params = self.bind(&tape, LeafKind::Constant);
        let a = tape.constant(Tensor::row(treatments));
        let last = vec![history.last_outcome(); n];
        let out = self.forward(&tape, &params, &enc, &last, a, Dropout::Rows(rngs))?.value();
        Ok((0..n).map(|i| out.data()[i * self.arch.tau..(i + 1) * self.arch.tau].to_vec()).collect())
    }

    fn check_treatments(&self, treatments: &[f64]) -> Result<()> {
        if treatments.len() != self.arch.tau {
            return Err(Error::invalid(format!(
                "expected {} future treatments, got {}",
                self.arch.tau,
                treatments.len()
            )));
        }
        Ok(())
    }
}

pub(crate) fn bind_weights<'t>(tape: &'t Tape, weights: &[Tensor], kind: LeafKind) -> Vec<Var<'t>> {
    weights
        .iter()
        .map(|w| match kind {
            LeafKind::Weight => tape.weight(w.clone()),
            LeafKind::Input => tape.input(w.clone()),
            LeafKind::Constant => tape.constant(w.clone()),
        })
        .collect()
}
