use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Constraint family selectable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintKind {
    /// Centre the trajectory, then clamp into `[lo, hi]`.
    Range,
    /// Continuous soft clamp (default).
    Soft,
    /// Soft clamp with the discontinuous `αA` tails.
    SoftJump,
    Tanh,
}

impl ConstraintKind {
    pub fn name(self) -> &'static str {
        match self {
            ConstraintKind::Range => "range",
            ConstraintKind::Soft => "soft",
            ConstraintKind::SoftJump => "soft-paper",
            ConstraintKind::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for ConstraintKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "range" => Ok(ConstraintKind::Range),
            "soft" | "soft-continuous" => Ok(ConstraintKind::Soft),
            "soft-paper" => Ok(ConstraintKind::SoftJump),
            "tanh" => Ok(ConstraintKind::Tanh),
            other => Err(Error::Config(format!(
                "unknown constraint `{other}` (expected range, soft, soft-paper or tanh)"
            ))),
        }
    }
}

impl std::fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Mapping `v` from raw parameters to feasible doses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Constraint {
    Range { lo: f64, hi: f64 },
    Soft { alpha: f64, beta: f64 },
    SoftJump { alpha: f64, beta: f64 },
    Tanh { beta: f64 },
}

fn soft(a: f64, alpha: f64, beta: f64) -> (f64, f64) {
    if a.abs() > beta {
        (a.signum() * (beta + alpha * (a.abs() - beta)), alpha)
    } else {
        (a, 1.0)
    }
}

fn soft_jump(a: f64, alpha: f64, beta: f64) -> (f64, f64) {
    if a.abs() > beta {
        (alpha * a, alpha)
    } else {
        (a, 1.0)
    }
}

impl Constraint {
    pub fn kind(&self) -> ConstraintKind {
        match self {
            Constraint::Range { .. } => ConstraintKind::Range,
            Constraint::Soft { .. } => ConstraintKind::Soft,
            Constraint::SoftJump { .. } => ConstraintKind::SoftJump,
            Constraint::Tanh { .. } => ConstraintKind::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Constraint::Range { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            Constraint::Soft { alpha, beta } | Constraint::SoftJump { alpha, beta } => {
                beta > 0.0 && beta.is_finite() && alpha > 0.0 && alpha <= 1.0
            }
            Constraint::Tanh { beta } => beta > 0.0 && beta.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid constraint parameters {self:?}")))
        }
    }

    /// Applies the mapping on the tape.
    ///
    /// The range clamp passes gradients straight through the clamp; the
    /// centring step keeps its exact derivative.
    pub fn apply<'t>(&self, raw: Var<'t>) -> Result<Var<'t>> {
        match *self {
            Constraint::Range { lo, hi } => {
                let centred = raw.sub(raw.mean()?)?;
                centred.map("range-clamp", |x| (x.clamp(lo, hi), 1.0))
            }
            Constraint::Soft { alpha, beta } => raw.map("soft-clamp", |x| soft(x, alpha, beta)),
            Constraint::SoftJump { alpha, beta } => raw.map("soft-clamp-jump", |x| soft_jump(x, alpha, beta)),
            Constraint::Tanh { beta } => {
                // tanh rounds to ±1 for large inputs; keep the band open
                let cap = beta.next_down();
                raw.map("tanh-clamp", |x| {
                    let t = x.tanh();
                    ((beta * t).clamp(-cap, cap), beta * (1.0 - t * t))
                })
            }
        }
    }

    /// Applies the mapping to plain values (bit-identical to [`Self::apply`]).
    pub fn map_values(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        Ok(self.apply(tape.constant(Tensor::row(raw)))?.value().into_data())
    }

    /// A raw value that maps to `dose` when the mapping is invertible there;
    /// otherwise `dose` itself.
    pub fn preimage(&self, dose: f64) -> f64 {
        match *self {
            Constraint::Tanh { beta } if dose.abs() < beta => (dose / beta).atanh(),
            Constraint::Soft { alpha, beta } if dose.abs() > beta => dose.signum() * (beta + (dose.abs() - beta) / alpha),
            _ => dose,
        }
    }

    /// Whether `dose` lies in the feasible set.
    pub fn contains(&self, dose: f64) -> bool {
        match *self {
            Constraint::Range { lo, hi } => (lo..=hi).contains(&dose),
            Constraint::Tanh { beta } => dose.abs() < beta,
            Constraint::Soft { .. } | Constraint::SoftJump { .. } => dose.is_finite(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_example() {
        let c = Constraint::Range { lo: -1.0, hi: 1.0 };
        assert_eq!(c.map_values(&[0.5, 1.5, 2.5]).unwrap(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(c.map_values(&[3.0; 4]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn soft_examples() {
        let cont = Constraint::Soft { alpha: 0.01, beta: 4.0 };
        let jump = Constraint::SoftJump { alpha: 0.01, beta: 4.0 };
        assert_eq!(cont.map_values(&[2.0]).unwrap(), vec![2.0]);
        assert_eq!(jump.map_values(&[2.0]).unwrap(), vec![2.0]);
        assert!((jump.map_values(&[10.0]).unwrap()[0] - 0.1).abs() < 1e-15);
        assert!((cont.map_values(&[10.0]).unwrap()[0] - 4.06).abs() < 1e-12);
        assert!((cont.map_values(&[-10.0]).unwrap()[0] + 4.06).abs() < 1e-12);
    }

    #[test]
    fn tanh_examples() {
        let c = Constraint::Tanh { beta: 4.0 };
        assert_eq!(c.map_values(&[0.0]).unwrap(), vec![0.0]);
        assert!((c.map_values(&[1.0]).unwrap()[0] - 3.046_376_623_522_4).abs() < 1e-9);
        assert!(c.map_values(&[1e6]).unwrap()[0] < 4.0);
        assert!(c.map_values(&[-1e6]).unwrap()[0] > -4.0);
    }

    #[test]
    fn preimages_round_trip() {
        for c in [
            Constraint::Tanh { beta: 4.0 },
            Constraint::Soft { alpha: 0.01, beta: 4.0 },
            Constraint::SoftJump { alpha: 0.01, beta: 4.0 },
        ] {
            for d in [0.05, 0.5, 0.99, 3.0] {
                assert!((c.map_values(&[c.preimage(d)]).unwrap()[0] - d).abs() < 1e-12, "{c:?} {d}");
            }
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(Constraint::Range { lo: 1.0, hi: 1.0 }.validate().is_err());
        assert!(Constraint::Soft { alpha: 0.0, beta: 4.0 }.validate().is_err());
        assert!(Constraint::SoftJump { alpha: 1.5, beta: 4.0 }.validate().is_err());
        assert!(Constraint::Tanh { beta: -1.0 }.validate().is_err());
    }
}
