//! Adaptive random forest: Hoeffding trees trained by online (Poisson) bagging on random
//! feature subspaces, voting with their windowed prequential accuracy. A member whose
//! accuracy falls more than `rho` below the ensemble mean is reset in place.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hoeffding::{HoeffdingConfig, HoeffdingTree};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub trees: usize,
    /// Poisson bagging intensity λ.
    pub lambda: f64,
    /// Accuracy window length W.
    pub window: usize,
    /// Replacement margin ρ below the ensemble mean weight.
    pub rho: f64,
    pub tree: HoeffdingConfig,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 10,
            lambda: 6.0,
            window: 500,
            rho: 0.10,
            tree: HoeffdingConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForestMember {
    tree: HoeffdingTree,
    feature_mask: Vec<usize>,
    window: VecDeque<bool>,
    hits: usize,
}

impl ForestMember {
    fn new<R: Rng>(dim: usize, num_classes: usize, config: &ForestConfig, rng: &mut R) -> Result<Self> {
        let mask = sample_mask(dim, rng);
        Ok(ForestMember {
            tree: HoeffdingTree::new(mask.len(), num_classes, config.tree)?,
            feature_mask: mask,
            window: VecDeque::with_capacity(config.window),
            hits: 0,
        })
    }

    pub fn tree(&self) -> &HoeffdingTree {
        &self.tree
    }

    pub fn feature_mask(&self) -> &[usize] {
        &self.feature_mask
    }

    /// Windowed prequential accuracy; 0 for an empty window.
    pub fn weight(&self) -> f64 {
        if self.window.is_empty() {
            0.0
        } else {
            self.hits as f64 / self.window.len() as f64
        }
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    fn masked(&self, x: &[f32]) -> Vec<f32> {
        self.feature_mask.iter().map(|&i| x[i]).collect()
    }

    fn record(&mut self, hit: bool, capacity: usize) {
        if self.window.len() == capacity && self.window.pop_front() == Some(true) {
            self.hits -= 1;
        }
        self.window.push_back(hit);
        self.hits += hit as usize;
    }

    fn vote(&self, x: &[f32]) -> Result<usize> {
        self.tree.predict(&self.masked(x))
    }
}

/// `round(sqrt(dim))` distinct features (at least one), sorted.
fn sample_mask<R: Rng>(dim: usize, rng: &mut R) -> Vec<usize> {
    let size = ((dim as f64).sqrt().round() as usize).clamp(1, dim);
    let mut mask = index::sample(rng, dim, size).into_vec();
    mask.sort_unstable();
    mask
}

/// Weighted plurality vote: the class with the largest weight sum among those voted for;
/// ties go to the lowest class index.
pub fn weighted_vote(votes: &[(usize, f64)], num_classes: usize) -> usize {
    let mut tally = vec![f64::NEG_INFINITY; num_classes];
    for &(class, w) in votes {
        tally[class] = if tally[class] == f64::NEG_INFINITY { w } else { tally[class] + w };
    }
    let mut best = 0;
    for (c, &t) in tally.iter().enumerate() {
        if t > tally[best] {
            best = c;
        }
    }
    best
}

/// The replacement test: `weight < mean − rho`.
pub fn should_replace(weight: f64, mean_weight: f64, rho: f64) -> bool {
    weight < mean_weight - rho
}

#[derive(Clone, Debug)]
pub struct AdaptiveForest {
    config: ForestConfig,
    dim: usize,
    num_classes: usize,
    members: Vec<ForestMember>,
    resets: u64,
}

impl AdaptiveForest {
    pub fn new<R: Rng>(dim: usize, num_classes: usize, config: ForestConfig, rng: &mut R) -> Result<Self> {
        if config.trees == 0 || config.window == 0 || !(config.lambda >= 0.0) {
            return Err(Error::config("forest needs ≥ 1 tree, a positive window and λ ≥ 0"));
        }
        let members = (0..config.trees)
            .map(|_| ForestMember::new(dim, num_classes, &config, rng))
            .collect::<Result<_>>()?;
        Ok(AdaptiveForest {
            config,
            dim,
            num_classes,
            members,
            resets: 0,
        })
    }

    pub fn members(&self) -> &[ForestMember] {
        &self.members
    }

    pub fn resets(&self) -> u64 {
        self.resets
    }

    fn check_dim(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::contract(format!("forest expects {} features, got {}", self.dim, x.len())));
        }
        Ok(())
    }

    /// Test-then-train on one instance, followed by the replacement check.
    pub fn train_instance<R: Rng>(&mut self, x: &[f32], label: usize, rng: &mut R) -> Result<()> {
        self.check_dim(x)?;
        let poisson = (self.config.lambda > 0.0).then(|| Poisson::new(self.config.lambda).expect("λ > 0"));
        for m in &mut self.members {
            let hit = m.vote(x)? == label;
            m.record(hit, self.config.window);
            let repeats = poisson.as_ref().map_or(0, |p| p.sample(rng) as u64);
            if repeats > 0 {
                let xm = m.masked(x);
                for _ in 0..repeats {
                    m.tree.observe(&xm, label)?;
                }
            }
        }
        self.maybe_replace(rng)
    }

    /// Resets every full-window member whose weight falls below `mean − rho`.
    pub fn maybe_replace<R: Rng>(&mut self, rng: &mut R) -> Result<()> {
        let mean = self.members.iter().map(ForestMember::weight).sum::<f64>() / self.members.len() as f64;
        for i in 0..self.members.len() {
            let m = &self.members[i];
            if m.window.len() < self.config.window || !should_replace(m.weight(), mean, self.config.rho) {
                continue;
            }
            self.members[i] = ForestMember::new(self.dim, self.num_classes, &self.config, rng)?;
            self.resets += 1;
        }
        Ok(())
    }

    pub fn votes(&self, x: &[f32]) -> Result<Vec<(usize, f64)>> {
        self.check_dim(x)?;
        self.members.iter().map(|m| Ok((m.vote(x)?, m.weight()))).collect()
    }

    pub fn predict(&self, x: &[f32]) -> Result<usize> {
        Ok(weighted_vote(&self.votes(x)?, self.num_classes))
    }

    /// Normalized weighted vote shares, Laplace-smoothed so every class is positive.
    pub fn predict_proba(&self, x: &[f32]) -> Result<Vec<f64>> {
        let mut tally = vec![1e-3; self.num_classes];
        for (c, w) in self.votes(x)? {
            tally[c] += w;
        }
        let total: f64 = tally.iter().sum();
        Ok(tally.into_iter().map(|t| t / total).collect())
    }

    /// Test-only hook to pin member weights.
    #[cfg(test)]
    fn force_window(&mut self, member: usize, hits: usize, len: usize) {
        let m = &mut self.members[member];
        m.window = (0..len).map(|i| i < hits).collect();
        m.hits = hits;
    }
}
