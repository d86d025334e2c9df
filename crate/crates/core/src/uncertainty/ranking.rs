use rand::seq::index;

use crate::rng::Rng;
use crate::{Error, Result};

/// Patients ordered from least to most uncertain.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    /// Indices into the scored set; ties keep index order.
    pub order: Vec<usize>,
}

/// Sorts by ascending score (mean horizon variance).
pub fn rank_by_uncertainty(scores: &[f64]) -> Result<Ranking> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot rank an empty set"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("uncertainty score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    Ok(Ranking { order })
}

impl Ranking {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Subset size for percentage `p`, rounded up and at least one.
    pub fn subset_size(&self, p: f64) -> usize {
        let n = self.order.len();
        ((p.clamp(0.0, 100.0) / 100.0 * n as f64).ceil() as usize).clamp(1, n)
    }

    /// The least-uncertain `p`% of patients.
    pub fn least_uncertain(&self, p: f64) -> Vec<usize> {
        self.order[..self.subset_size(p)].to_vec()
    }

    /// A uniformly random subset of the same size, in index order.
    pub fn random_subset(&self, p: f64, rng: &mut Rng) -> Vec<usize> {
        let mut idx = index::sample(rng, self.order.len(), self.subset_size(p)).into_vec();
        idx.sort_unstable();
        idx
    }
}
