//! Incremental Hoeffding Tree over dense numeric features.
//!
//! Each leaf keeps, per feature, a running min/max and an equal-width histogram of the
//! values it has seen, split by class. Split candidates are the interior histogram
//! boundaries. Every `grace_period` observations a leaf compares the best information
//! gain of the two best features; it splits when the difference beats the Hoeffding
//! bound `ε = sqrt(R² ln(1/δ) / 2n)` with `R = log₂ C`, or when `ε < τ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HoeffdingConfig {
    /// Split confidence δ.
    pub delta: f64,
    /// Tie-break threshold τ.
    pub tau: f64,
    /// Observations between split attempts at a leaf (n_min).
    pub grace_period: u64,
    pub max_depth: Option<usize>,
    pub bins: usize,
}

impl Default for HoeffdingConfig {
    fn default() -> Self {
        HoeffdingConfig {
            delta: 0.01,
            tau: 0.05,
            grace_period: 200,
            max_depth: None,
            bins: 10,
        }
    }
}

/// `sqrt(R² ln(1/δ) / (2n))`.
pub fn hoeffding_epsilon(range: f64, delta: f64, n: u64) -> Result<f64> {
    if !(range > 0.0) || !(delta > 0.0 && delta <= 1.0) || n == 0 {
        return Err(Error::contract(format!(
            "hoeffding bound needs R > 0, 0 < δ ≤ 1, n ≥ 1; got R={range}, δ={delta}, n={n}"
        )));
    }
    Ok((range * range * (1.0 / delta).ln() / (2.0 * n as f64)).sqrt())
}

/// Base-2 entropy of a count vector, with `0·log 0 = 0`.
pub fn entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.log2()
        })
        .sum()
}

/// Information gain (bits) of splitting `parent` into `left` and `right`.
pub fn info_gain(parent: &[u64], left: &[u64], right: &[u64]) -> Result<f64> {
    if parent.len() != left.len()
        || parent.len() != right.len()
        || parent.iter().zip(left.iter().zip(right)).any(|(p, (l, r))| l + r != *p)
    {
        return Err(Error::contract("child counts must sum to the parent counts"));
    }
    Ok(unchecked_gain(parent, left, right))
}

fn unchecked_gain(parent: &[u64], left: &[u64], right: &[u64]) -> f64 {
    let n: u64 = parent.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let (nl, nr) = (left.iter().sum::<u64>() as f64, right.iter().sum::<u64>() as f64);
    entropy(parent) - (nl / n as f64) * entropy(left) - (nr / n as f64) * entropy(right)
}

/// The split rule: take the best candidate when `ΔG > ε` or when `ε < τ`.
pub fn should_split(best_gain: f64, second_gain: f64, epsilon: f64, tau: f64) -> bool {
    best_gain - second_gain > epsilon || epsilon < tau
}

/// Laplace-smoothed (+1) class distribution.
pub fn smoothed_distribution(counts: &[u64]) -> Vec<f64> {
    let total = counts.iter().sum::<u64>() as f64 + counts.len() as f64;
    counts.iter().map(|&c| (c as f64 + 1.0) / total).collect()
}

/// Per-leaf sufficient statistics gathered since the leaf was created.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafStats {
    num_classes: usize,
    bins: usize,
    class_counts: Vec<u64>,
    min: Vec<f64>,
    max: Vec<f64>,
    /// `[feature][class][bin]`
    histogram: Vec<u64>,
    since_attempt: u64,
}

impl LeafStats {
    fn new(dim: usize, num_classes: usize, bins: usize) -> Self {
        LeafStats {
            num_classes,
            bins,
            class_counts: vec![0; num_classes],
            min: vec![f64::INFINITY; dim],
            max: vec![f64::NEG_INFINITY; dim],
            histogram: vec![0; dim * num_classes * bins],
            since_attempt: 0,
        }
    }

    pub fn class_counts(&self) -> &[u64] {
        &self.class_counts
    }

    pub fn seen(&self) -> u64 {
        self.class_counts.iter().sum()
    }

    pub fn feature_range(&self, feature: usize) -> (f64, f64) {
        (self.min[feature], self.max[feature])
    }

    /// Histogram mass for one (feature, class), summed over bins.
    pub fn histogram_total(&self, feature: usize, class: usize) -> u64 {
        self.bins_of(feature, class).iter().sum()
    }

    fn bins_of(&self, feature: usize, class: usize) -> &[u64] {
        let start = (feature * self.num_classes + class) * self.bins;
        &self.histogram[start..start + self.bins]
    }

    fn bin(&self, feature: usize, value: f64) -> usize {
        bin_index(self.min[feature], self.max[feature], self.bins, value)
    }

    fn observe(&mut self, x: &[f32], label: usize) {
        self.class_counts[label] += 1;
        self.since_attempt += 1;
        for (f, &v) in x.iter().enumerate() {
            let v = v as f64;
            let (lo, hi) = (self.min[f], self.max[f]);
            if v < lo || v > hi {
                self.widen(f, lo.min(v), hi.max(v));
            }
            let b = self.bin(f, v);
            let start = (f * self.num_classes + label) * self.bins;
            self.histogram[start + b] += 1;
        }
    }

    /// Moves each existing bin's mass to the new bin holding its old center.
    fn widen(&mut self, feature: usize, lo: f64, hi: f64) {
        let (old_lo, old_hi) = (self.min[feature], self.max[feature]);
        self.min[feature] = lo;
        self.max[feature] = hi;
        if old_lo > old_hi {
            return;
        }
        let width = (old_hi - old_lo) / self.bins as f64;
        for c in 0..self.num_classes {
            let start = (feature * self.num_classes + c) * self.bins;
            let old: Vec<u64> = self.histogram[start..start + self.bins].to_vec();
            let slot = &mut self.histogram[start..start + self.bins];
            slot.fill(0);
            for (b, count) in old.into_iter().enumerate().filter(|(_, n)| *n > 0) {
                let center = old_lo + (b as f64 + 0.5) * width;
                slot[bin_index(lo, hi, self.bins, center)] += count;
            }
        }
    }

    /// Best threshold for one feature, if the feature has a non-degenerate range.
    fn best_for_feature(&self, feature: usize) -> Option<Candidate> {
        let (lo, hi) = self.feature_range(feature);
        if !(hi > lo) {
            return None;
        }
        let width = (hi - lo) / self.bins as f64;
        let mut left = vec![0u64; self.num_classes];
        let mut best: Option<Candidate> = None;
        for boundary in 1..self.bins {
            for (c, l) in left.iter_mut().enumerate() {
                *l += self.bins_of(feature, c)[boundary - 1];
            }
            let right: Vec<u64> = self.class_counts.iter().zip(&left).map(|(p, l)| p - l).collect();
            let gain = unchecked_gain(&self.class_counts, &left, &right);
            if best.as_ref().is_none_or(|b| gain > b.gain) {
                best = Some(Candidate {
                    feature,
                    threshold: lo + boundary as f64 * width,
                    gain,
                    left: left.clone(),
                    right,
                });
            }
        }
        best
    }
}

fn bin_index(lo: f64, hi: f64, bins: usize, v: f64) -> usize {
    if !(hi > lo) {
        return 0;
    }
    (((v - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

#[derive(Clone, Debug)]
struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
    left: Vec<u64>,
    right: Vec<u64>,
}

/// A recorded split, with the quantities that justified it.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitEvent {
    pub feature: usize,
    pub threshold: f64,
    pub best_gain: f64,
    pub second_gain: f64,
    pub epsilon: f64,
    pub n: u64,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitDecision {
    Split(SplitEvent),
    Wait,
}

/// Evaluates the split rule for a leaf's statistics.
pub fn attempt_split(stats: &LeafStats, config: &HoeffdingConfig, depth: usize) -> SplitDecision {
    attempt(stats, config, depth).0
}

fn attempt(stats: &LeafStats, config: &HoeffdingConfig, depth: usize) -> (SplitDecision, Option<Candidate>) {
    if stats.class_counts.iter().filter(|&&c| c > 0).count() < 2 {
        return (SplitDecision::Wait, None);
    }
    let mut per_feature: Vec<Candidate> = (0..stats.min.len()).filter_map(|f| stats.best_for_feature(f)).collect();
    per_feature.sort_by(|a, b| b.gain.total_cmp(&a.gain).then(a.feature.cmp(&b.feature)));
    let Some(best) = per_feature.first().cloned() else {
        return (SplitDecision::Wait, None);
    };
    let second = per_feature.get(1).map_or(0.0, |c| c.gain);
    let range = (stats.num_classes as f64).log2();
    let n = stats.seen();
    let epsilon = hoeffding_epsilon(range, config.delta, n).expect("leaf has observations");
    if best.gain > 0.0 && should_split(best.gain, second, epsilon, config.tau) {
        let event = SplitEvent {
            feature: best.feature,
            threshold: best.threshold,
            best_gain: best.gain,
            second_gain: second,
            epsilon,
            n,
            depth,
        };
        (SplitDecision::Split(event), Some(best))
    } else {
        (SplitDecision::Wait, None)
    }
}

#[derive(Clone, Debug)]
struct Leaf {
    depth: usize,
    /// Inherited plus observed class counts; drives prediction.
    counts: Vec<u64>,
    stats: LeafStats,
}

#[derive(Clone, Debug)]
enum Node {
    Leaf(Leaf),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug)]
pub struct HoeffdingTree {
    config: HoeffdingConfig,
    dim: usize,
    num_classes: usize,
    nodes: Vec<Node>,
    observations: u64,
    splits: Vec<SplitEvent>,
}

impl HoeffdingTree {
    pub fn new(dim: usize, num_classes: usize, config: HoeffdingConfig) -> Result<Self> {
        if num_classes < 2 || dim == 0 || config.bins < 2 || config.grace_period == 0 {
            return Err(Error::config(
                "hoeffding tree needs ≥ 2 classes, dim ≥ 1, ≥ 2 bins and a positive grace period",
            ));
        }
        let root = Node::Leaf(Leaf {
            depth: 0,
            counts: vec![0; num_classes],
            stats: LeafStats::new(dim, num_classes, config.bins),
        });
        Ok(HoeffdingTree {
            config,
            dim,
            num_classes,
            nodes: vec![root],
            observations: 0,
            splits: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn observations(&self) -> u64 {
        self.observations
    }

    pub fn split_events(&self) -> &[SplitEvent] {
        &self.splits
    }

    pub fn is_leaf_root(&self) -> bool {
        matches!(self.nodes[0], Node::Leaf(_))
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }

    /// Sum of every leaf's class counts; equals the number of observations.
    pub fn leaf_count_total(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| match n {
                Node::Leaf(l) => l.counts.iter().sum(),
                Node::Split { .. } => 0,
            })
            .sum()
    }

    /// Statistics of the leaf `x` routes to.
    pub fn leaf_stats(&self, x: &[f32]) -> &LeafStats {
        match &self.nodes[self.route(x)] {
            Node::Leaf(l) => &l.stats,
            Node::Split { .. } => unreachable!("route ends at a leaf"),
        }
    }

    fn route(&self, x: &[f32]) -> usize {
        let mut at = 0;
        while let Node::Split {
            feature,
            threshold,
            left,
            right,
        } = &self.nodes[at]
        {
            at = if (x[*feature] as f64) <= *threshold { *left } else { *right };
        }
        at
    }

    fn check_dim(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::contract(format!(
                "tree expects {} features, got {}",
                self.dim,
                x.len()
            )));
        }
        Ok(())
    }

    pub fn observe(&mut self, x: &[f32], label: usize) -> Result<()> {
        self.check_dim(x)?;
        if label >= self.num_classes {
            return Err(Error::contract(format!("label {label} out of range")));
        }
        self.observations += 1;
        let at = self.route(x);
        let Node::Leaf(leaf) = &mut self.nodes[at] else { unreachable!() };
        leaf.counts[label] += 1;
        leaf.stats.observe(x, label);
        if leaf.stats.since_attempt < self.config.grace_period {
            return Ok(());
        }
        leaf.stats.since_attempt = 0;
        if self.config.max_depth.is_some_and(|d| leaf.depth >= d) {
            return Ok(());
        }
        if let (SplitDecision::Split(event), Some(best)) = attempt(&leaf.stats, &self.config, leaf.depth) {
            self.split(at, event, best);
        }
        Ok(())
    }

    fn split(&mut self, at: usize, event: SplitEvent, best: Candidate) {
        let Node::Leaf(leaf) = &self.nodes[at] else { unreachable!() };
        let depth = leaf.depth + 1;
        // Observed counts split by the histogram; inherited counts split proportionally.
        let mut left_counts = best.left.clone();
        let mut right_counts = best.right.clone();
        for c in 0..self.num_classes {
            let observed = leaf.stats.class_counts[c];
            let inherited = leaf.counts[c] - observed;
            let to_left = if observed == 0 {
                inherited / 2
            } else {
                (inherited as u128 * best.left[c] as u128 / observed as u128) as u64
            };
            left_counts[c] += to_left;
            right_counts[c] += inherited - to_left;
        }
        let make = |counts| {
            Node::Leaf(Leaf {
                depth,
                counts,
                stats: LeafStats::new(self.dim, self.num_classes, self.config.bins),
            })
        };
        let (l, r) = (make(left_counts), make(right_counts));
        let left = self.nodes.len();
        self.nodes.push(l);
        self.nodes.push(r);
        self.nodes[at] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right: left + 1,
        };
        self.splits.push(event);
    }

    pub fn predict_proba(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        match &self.nodes[self.route(x)] {
            Node::Leaf(l) => Ok(smoothed_distribution(&l.counts)),
            Node::Split { .. } => unreachable!(),
        }
    }

    /// Most probable class; ties go to the lowest index.
    pub fn predict(&self, x: &[f32]) -> Result<usize> {
        Ok(crate::nn::argmax(&self.predict_proba(x)?))
    }
}
