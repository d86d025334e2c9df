//! Hilbert-Schmidt independence criterion, differentiable on the tape.
//!
//! Biased V-statistic `sum(Kc ⊙ Lc) / n²` with Gaussian kernels, where `Kc`
//! and `Lc` are the double-centred Gram matrices. Bandwidths come from the
//! median pairwise distance of the current samples and are treated as
//! constants during differentiation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Smallest admissible kernel bandwidth.
pub const MIN_BANDWIDTH: f64 = 1e-6;

/// Gaussian kernel bandwidth rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    #[default]
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HsicConfig {
    pub bandwidth_u: Bandwidth,
    pub bandwidth_v: Bandwidth,
}

impl HsicConfig {
    pub fn validate(&self) -> Result<()> {
        for b in [self.bandwidth_u, self.bandwidth_v] {
            if let Bandwidth::Fixed(s) = b {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::Config(format!("hsic bandwidth must be > 0, got {s}")));
                }
            }
        }
        Ok(())
    }
}

fn median_distance(d2: &Tensor) -> f64 {
    let n = d2.rows();
    let mut d: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| d2.get(i, j).max(0.0).sqrt())
        .collect();
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

/// Median pairwise Euclidean distance between rows, floored at [`MIN_BANDWIDTH`].
pub fn median_bandwidth(x: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let v = tape.constant(x.clone());
    Ok(median_distance(&sq_distances(v)?.value()).max(MIN_BANDWIDTH))
}

fn sq_distances(x: Var<'_>) -> Result<Var<'_>> {
    let sq = x.square()?.sum_axis(1)?;
    let cross = x.matmul(x.transpose()?)?.scale(-2.0)?;
    cross.add(sq)?.add(sq.transpose()?)?.relu()
}

/// Centred Gaussian Gram matrix of the rows of `x`.
fn centred_gram<'t>(x: Var<'t>, bandwidth: Bandwidth) -> Result<Var<'t>> {
    let d2 = sq_distances(x)?;
    let sigma = match bandwidth {
        Bandwidth::Median => median_distance(&d2.value()),
        Bandwidth::Fixed(s) => s,
    }
    .max(MIN_BANDWIDTH);
    let k = d2.scale(-0.5 / (sigma * sigma))?.exp()?;
    k.sub(k.mean_axis(0)?)?.sub(k.mean_axis(1)?)?.add(k.mean()?)
}

/// HSIC between paired samples `u` (n × d₁) and `v` (n × d₂).
pub fn hsic<'t>(u: Var<'t>, v: Var<'t>, config: &HsicConfig) -> Result<Var<'t>> {
    let (nu, _) = u.value().dims2("hsic")?;
    let (nv, _) = v.value().dims2("hsic")?;
    if nu != nv {
        return Err(Error::ShapeMismatch {
            op: "hsic",
            left: u.shape(),
            right: v.shape(),
        });
    }
    if nu < 4 {
        return Err(Error::invalid(format!("hsic needs at least 4 samples, got {nu}")));
    }
    let kc = centred_gram(u, config.bandwidth_u)?;
    let lc = centred_gram(v, config.bandwidth_v)?;
    kc.mul(lc)?.sum()?.scale(1.0 / (nu * nu) as f64)
}

/// HSIC of plain tensors.
pub fn hsic_value(u: &Tensor, v: &Tensor, config: &HsicConfig) -> Result<f64> {
    let tape = Tape::new();
    Ok(hsic(tape.constant(u.clone()), tape.constant(v.clone()), config)?.item())
}

/// Observed statistic plus its permutation null distribution.
#[derive(Debug, Clone)]
pub struct PermutationTest {
    pub statistic: f64,
    pub null: Vec<f64>,
}

impl PermutationTest {
    /// Empirical `q`-quantile of the null (nearest rank).
    pub fn null_quantile(&self, q: f64) -> f64 {
        let mut s = self.null.clone();
        s.sort_by(f64::total_cmp);
        let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
        s[rank - 1]
    }

    pub fn p_value(&self) -> f64 {
        let above = self.null.iter().filter(|&&x| x >= self.statistic).count();
        (above + 1) as f64 / (self.null.len() + 1) as f64
    }
}

/// Permutation test of independence: shuffles the rows of `v` relative to `u`.
///
/// Centring commutes with a joint row/column permutation, so the centred Gram
/// matrices are built once and only re-indexed per permutation.
pub fn permutation_test<R: rand::Rng + ?Sized>(
    u: &Tensor,
    v: &Tensor,
    config: &HsicConfig,
    n_permutations: usize,
    rng: &mut R,
) -> Result<PermutationTest> {
    use rand::seq::SliceRandom;

    let statistic = hsic_value(u, v, config)?;
    let tape = Tape::new();
    let kc = centred_gram(tape.constant(u.clone()), config.bandwidth_u)?.value();
    let lc = centred_gram(tape.constant(v.clone()), config.bandwidth_v)?.value();
    let n = kc.rows();
    let scale = 1.0 / (n * n) as f64;
    let mut perm: Vec<usize> = (0..n).collect();
    let null = (0..n_permutations)
        .map(|_| {
            perm.shuffle(rng);
            let mut total = 0.0;
            for (i, &pi) in perm.iter().enumerate() {
                let krow = &kc.data()[i * n..(i + 1) * n];
                let lrow = &lc.data()[pi * n..(pi + 1) * n];
                total += krow.iter().zip(&perm).map(|(k, &pj)| k * lrow[pj]).sum::<f64>();
            }
            total * scale
        })
        .collect();
    Ok(PermutationTest { statistic, null })
}
