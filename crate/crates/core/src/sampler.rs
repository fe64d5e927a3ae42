//! Log-uniform (Zipfian) negative sampling over frequency-ranked items.

use std::collections::{HashMap, HashSet};

use rand::Rng;

use crate::error::{Error, Result};

/// Draws ranks `r ∈ [0, V)` with `P(r) = ln((r+2)/(r+1)) / ln(V+1)` and maps
/// them to item indices through `ranked`.
#[derive(Clone, Debug)]
pub struct LogUniformSampler {
    ranked: Vec<usize>,
    rank_of: HashMap<usize, usize>,
    log_range: f64,
}

impl LogUniformSampler {
    /// `ranked[r]` is the item index holding rank `r`.
    pub fn new(ranked: Vec<usize>) -> Result<Self> {
        if ranked.is_empty() {
            return Err(Error::InvalidArgument("sampler needs at least one item".into()));
        }
        let rank_of: HashMap<usize, usize> = ranked.iter().enumerate().map(|(r, &i)| (i, r)).collect();
        if rank_of.len() != ranked.len() {
            return Err(Error::InvalidArgument("ranked items must be distinct".into()));
        }
        let log_range = ((ranked.len() + 1) as f64).ln();
        Ok(LogUniformSampler {
            ranked,
            rank_of,
            log_range,
        })
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }

    pub fn probability(&self, rank: usize) -> f64 {
        ((rank as f64 + 2.0) / (rank as f64 + 1.0)).ln() / self.log_range
    }

    /// Inverse-CDF draw: `P(r ≤ k) = ln(k+2)/ln(V+1)`.
    pub fn sample_rank(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let r = (u * self.log_range).exp().floor() as usize;
        r.saturating_sub(1).min(self.ranked.len() - 1)
    }

    /// `n` distinct items, none in `exclude`, drawn by rejection.
    pub fn sample_distinct(&self, n: usize, exclude: &HashSet<usize>, rng: &mut impl Rng) -> Result<Sample> {
        let excluded_ranks: HashSet<usize> = (0..self.ranked.len())
            .filter(|&r| exclude.contains(&self.ranked[r]))
            .collect();
        if n + excluded_ranks.len() > self.ranked.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot draw {n} distinct items from {} with {} excluded",
                self.ranked.len(),
                excluded_ranks.len()
            )));
        }
        let mut chosen = Vec::with_capacity(n);
        let mut seen = HashSet::with_capacity(n);
        let mut draws = 0u64;
        while chosen.len() < n {
            let r = self.sample_rank(rng);
            draws += 1;
            if !excluded_ranks.contains(&r) && seen.insert(r) {
                chosen.push(r);
            }
        }
        Ok(Sample {
            items: chosen.into_iter().map(|r| self.ranked[r]).collect(),
            draws,
        })
    }

    /// Log of the chance that `rank` shows up in `draws` draws,
    /// `1 - (1-p)^draws`.
    pub fn log_expected_count(&self, rank: usize, draws: u64) -> f64 {
        let p = self.probability(rank);
        // 1 - (1-p)^n, computed without cancellation for small p
        let q = -(draws as f64 * (-p).ln_1p()).exp_m1();
        q.ln()
    }

    pub fn rank_of(&self, item: usize) -> Option<usize> {
        self.rank_of.get(&item).copied()
    }

    /// [`Self::log_expected_count`] by item; items outside the sampler's
    /// range are never drawn and get no correction.
    pub fn log_q(&self, item: usize, draws: u64) -> f64 {
        self.rank_of(item).map_or(0.0, |r| self.log_expected_count(r, draws))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub items: Vec<usize>,
    /// Draws made, rejected ones included.
    pub draws: u64,
}
