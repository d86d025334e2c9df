//! Predictive uncertainty from repeated stochastic forward passes.
//!
//! All three methods produce a `[passes, τ]` block of raw-unit predictions
//! that is aggregated into a per-step mean and unbiased variance, so the
//! selection objective never needs to know which method produced it.

mod build;
mod geometric;
mod ranking;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{LeafKind, Tape, Tensor, Var};
use crate::models::{load_model, save_model, Architecture, Dropout, Encoding, History, SurrogateModel};
use crate::{rng, Error, Result};

pub use build::{build_handle, UncertaintyConfig};
pub use geometric::{build_geometric_ensemble, BezierCurve, CurveConfig};
pub use ranking::{rank_by_uncertainty, Ranking};

/// Default number of passes or members.
pub const DEFAULT_PASSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    McDropout,
    Ensemble,
    Geometric,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::McDropout => "mc-dropout",
            Method::Ensemble => "ensemble",
            Method::Geometric => "geometric",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc-dropout" => Ok(Method::McDropout),
            "ensemble" => Ok(Method::Ensemble),
            "geometric" => Ok(Method::Geometric),
            other => Err(Error::Config(format!(
                "unknown uncertainty method `{other}` (expected mc-dropout, ensemble or geometric)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-step predictive mean and variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEstimate {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub n_passes: usize,
    pub method: Method,
}

impl UncertaintyEstimate {
    /// `(1/τ) Σ σ̂²`, the scalar used for ranking and in the objective.
    pub fn mean_variance(&self) -> f64 {
        self.var.iter().sum::<f64>() / self.var.len() as f64
    }
}

/// The models behind one uncertainty method.
#[derive(Debug, Clone)]
pub struct EnsembleHandle {
    method: Method,
    members: Vec<SurrogateModel>,
    passes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct HandleManifest {
    method: Method,
    passes: usize,
    members: usize,
    arch: Architecture,
}

const HANDLE_FILE: &str = "handle.json";

impl EnsembleHandle {
    /// `passes` dropout-active passes of a single model.
    pub fn mc_dropout(model: SurrogateModel, passes: usize) -> Result<Self> {
        Self::new(Method::McDropout, vec![model], passes)
    }

    /// One deterministic pass per member.
    pub fn ensemble(members: Vec<SurrogateModel>) -> Result<Self> {
        let n = members.len();
        Self::new(Method::Ensemble, members, n)
    }

    pub(crate) fn new(method: Method, members: Vec<SurrogateModel>, passes: usize) -> Result<Self> {
        if passes < 2 {
            return Err(Error::invalid(format!("uncertainty needs at least 2 passes, got {passes}")));
        }
        let first = members.first().ok_or_else(|| Error::invalid("an ensemble needs members"))?;
        if members.iter().any(|m| m.arch() != first.arch()) {
            return Err(Error::Architecture("ensemble members differ in architecture".into()));
        }
        if method != Method::McDropout && members.len() != passes {
            return Err(Error::invalid("deterministic ensembles use one pass per member"));
        }
        Ok(Self {
            method,
            members,
            passes,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn members(&self) -> &[SurrogateModel] {
        &self.members
    }

    pub fn arch(&self) -> &Architecture {
        self.members[0].arch()
    }

    /// Encodes `history` once per member.
    pub fn encode(&self, history: &History) -> Result<HandleEncoding> {
        let encodings = self
            .members
            .iter()
            .map(|m| {
                let e = m.encode(&[history])?;
                match self.method {
                    Method::McDropout => e.repeat(self.passes),
                    _ => Ok(e),
                }
            })
            .collect::<Result<_>>()?;
        Ok(HandleEncoding {
            encodings,
            last_outcome: history.last_outcome(),
        })
    }

    /// Member weights as constants on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Vec<Var<'t>>> {
        self.members.iter().map(|m| m.bind(tape, LeafKind::Constant)).collect()
    }

    /// Raw-unit predictions `[passes, τ]` for treatments `a` (`[1, τ]`).
    ///
    /// Dropout streams are derived from `(seed, pass)`.
    pub fn passes_on_tape<'t>(
        &self,
        tape: &'t Tape,
        params: &[Vec<Var<'t>>],
        encoding: &HandleEncoding,
        a: Var<'t>,
        seed: u64,
    ) -> Result<Var<'t>> {
        match self.method {
            Method::McDropout => {
                let mut rngs: Vec<rng::Rng> = (0..self.passes as u64).map(|i| rng::stream(seed, &[i])).collect();
                let last = vec![encoding.last_outcome; self.passes];
                self.members[0].forward(
                    tape,
                    &params[0],
                    &encoding.encodings[0],
                    &last,
                    a,
                    Dropout::Rows(&mut rngs),
                )
            }
            Method::Ensemble | Method::Geometric => {
                let rows = self
                    .members
                    .iter()
                    .zip(params)
                    .zip(&encoding.encodings)
                    .map(|((m, p), e)| m.forward(tape, p, e, &[encoding.last_outcome], a, Dropout::Off))
                    .collect::<Result<Vec<_>>>()?;
                tape.vstack(&rows)
            }
        }
    }

    /// Non-differentiable estimate for one history and treatment plan.
    pub fn estimate(&self, history: &History, treatments: &[f64], seed: u64) -> Result<UncertaintyEstimate> {
        let encoding = self.encode(history)?;
        self.estimate_encoded(&encoding, treatments, seed)
    }

    pub fn estimate_encoded(
        &self,
        encoding: &HandleEncoding,
        treatments: &[f64],
        seed: u64,
    ) -> Result<UncertaintyEstimate> {
        if treatments.len() != self.arch().tau {
            return Err(Error::invalid(format!(
                "expected {} future treatments, got {}",
                self.arch().tau,
                treatments.len()
            )));
        }
        let tape = Tape::new();
        let params = self.bind(&tape);
        let a = tape.constant(Tensor::row(treatments));
        let passes = self.passes_on_tape(&tape, &params, encoding, a, seed)?;
        let agg = aggregate(passes)?;
        Ok(self.to_estimate(&agg))
    }

    pub fn to_estimate(&self, agg: &TapeEstimate<'_>) -> UncertaintyEstimate {
        UncertaintyEstimate {
            mu: agg.mu.value().into_data(),
            var: agg.var.value().into_data(),
            n_passes: self.passes,
            method: self.method,
        }
    }

    /// Writes `handle.json` and one model file per member into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let manifest = HandleManifest {
            method: self.method,
            passes: self.passes,
            members: self.members.len(),
            arch: *self.arch(),
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        let path = dir.join(HANDLE_FILE);
        std::fs::write(&path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        for (i, m) in self.members.iter().enumerate() {
            save_model(m, &dir.join(member_file(i)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(HANDLE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let manifest: HandleManifest = serde_json::from_str(&text)?;
        let members = (0..manifest.members)
            .map(|i| load_model(&dir.join(member_file(i)), Some(manifest.arch.flavor)))
            .collect::<Result<Vec<_>>>()?;
        if members.iter().any(|m| *m.arch() != manifest.arch) {
            return Err(Error::Architecture(format!(
                "member files in {} do not match handle.json",
                dir.display()
            )));
        }
        Self::new(manifest.method, members, manifest.passes)
    }
}

fn member_file(i: usize) -> String {
    format!("member-{i}.ctsm")
}

/// Cached per-member encodings of one history.
#[derive(Debug, Clone)]
pub struct HandleEncoding {
    encodings: Vec<Encoding>,
    last_outcome: f64,
}

/// Mean and variance nodes over a `[passes, τ]` block.
#[derive(Debug, Clone, Copy)]
pub struct TapeEstimate<'t> {
    pub passes: Var<'t>,
    pub mu: Var<'t>,
    pub var: Var<'t>,
}

/// Per-column mean and unbiased variance of `passes`.
///
/// Deviations are taken from the first pass before averaging, so identical
/// passes give a variance of exactly zero.
pub fn aggregate(passes: Var<'_>) -> Result<TapeEstimate<'_>> {
    let n = passes.shape()[0];
    if n < 2 {
        return Err(Error::invalid("variance needs at least 2 passes"));
    }
    let first = passes.slice_rows(0, 1)?;
    let dev = passes.sub(first)?;
    let shift = dev.mean_axis(0)?;
    let mu = first.add(shift)?;
    let var = dev.sub(shift)?.square()?.sum_axis(0)?.scale(1.0 / (n - 1) as f64)?;
    Ok(TapeEstimate { passes, mu, var })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_matches_two_pass_formula() {
        let data = [1.0, 2.0, 3.5, -1.0, 0.5, 2.0, 4.0, 0.0, 1.0];
        let tape = Tape::new();
        let p = tape.constant(Tensor::matrix(3, 3, data.to_vec()).unwrap());
        let agg = aggregate(p).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..3).map(|i| data[i * 3 + j]).collect();
            let m = col.iter().sum::<f64>() / 3.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 2.0;
            assert!((agg.mu.value().data()[j] - m).abs() < 1e-12);
            assert!((agg.var.value().data()[j] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_have_exactly_zero_variance() {
        let tape = Tape::new();
        let row = [0.1, 1.0 / 3.0, 7.7];
        let p = tape.constant(Tensor::matrix(8, 3, row.repeat(8)).unwrap());
        let agg = aggregate(p).unwrap();
        assert!(agg.var.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(agg.mu.value().data(), &row);
    }

    #[test]
    fn method_names() {
        for m in [Method::McDropout, Method::Ensemble, Method::Geometric] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }
}
