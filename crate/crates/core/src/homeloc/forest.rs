//! Random forest used to prune candidate-home records with high recall.
//!
//! Trees grow to purity on bootstrap samples, choosing among a random
//! subset of features at each split (sqrt of the feature count). A record
//! survives pruning when at least one tree calls it a home; leaf ties also
//! vote home, keeping recall as high as possible at this stage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homeloc::{ClusterRecord, FEATURE_COUNT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        prob_home: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn prob_home(&self, features: &[f64; FEATURE_COUNT]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { prob_home } => return *prob_home,
                TreeNode::Split { feature, threshold, left, right } => {
                    at = if features[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    /// Majority vote with ties toward home.
    pub fn votes_home(&self, features: &[f64; FEATURE_COUNT]) -> bool {
        self.prob_home(features) >= 0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<DecisionTree>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows to purity.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// Features considered per split; defaults to floor(sqrt(10)).
    pub features_per_split: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: None,
            min_samples_split: 2,
            features_per_split: (FEATURE_COUNT as f64).sqrt().floor() as usize,
        }
    }
}

struct TreeBuilder<'d> {
    features: &'d [[f64; FEATURE_COUNT]],
    labels: &'d [bool],
    cfg: &'d ForestConfig,
    nodes: Vec<TreeNode>,
}

impl<'d> TreeBuilder<'d> {
    fn gini(pos: usize, total: usize) -> f64 {
        if total == 0 {
            return 0.0;
        }
        let p = pos as f64 / total as f64;
        2.0 * p * (1.0 - p)
    }

    fn build(&mut self, indices: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let total = indices.len();
        let pos = indices.iter().filter(|&&i| self.labels[i]).count();
        let as_leaf = |nodes: &mut Vec<TreeNode>| {
            nodes.push(TreeNode::Leaf {
                prob_home: pos as f64 / total as f64,
            });
            nodes.len() - 1
        };
        if pos == 0
            || pos == total
            || total < self.cfg.min_samples_split
            || self.cfg.max_depth.is_some_and(|d| depth >= d)
        {
            return as_leaf(&mut self.nodes);
        }

        // Partial Fisher-Yates draw of candidate feature columns.
        let mut cols: Vec<usize> = (0..FEATURE_COUNT).collect();
        for k in 0..self.cfg.features_per_split.min(FEATURE_COUNT) {
            let swap = rng.gen_range(k..FEATURE_COUNT);
            cols.swap(k, swap);
        }
        cols.truncate(self.cfg.features_per_split.min(FEATURE_COUNT));

        let parent_impurity = Self::gini(pos, total) * total as f64;
        let mut best: Option<(f64, usize, f64)> = None; // (gain, feature, threshold)
        for &col in &cols {
            let mut values: Vec<(f64, bool)> = indices
                .iter()
                .map(|&i| (self.features[i][col], self.labels[i]))
                .collect();
            values.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0usize;
            let mut left_total = 0usize;
            for w in 0..values.len() - 1 {
                left_total += 1;
                if values[w].1 {
                    left_pos += 1;
                }
                if values[w].0 == values[w + 1].0 {
                    continue;
                }
                let right_total = total - left_total;
                let right_pos = pos - left_pos;
                let weighted = Self::gini(left_pos, left_total) * left_total as f64
                    + Self::gini(right_pos, right_total) * right_total as f64;
                let gain = parent_impurity - weighted;
                if best.is_none_or(|(g, _, _)| gain > g) {
                    let threshold = (values[w].0 + values[w + 1].0) / 2.0;
                    best = Some((gain, col, threshold));
                }
            }
        }
        let Some((gain, feature, threshold)) = best else {
            return as_leaf(&mut self.nodes);
        };
        if gain <= 1e-12 {
            return as_leaf(&mut self.nodes);
        }

        let split_at = stable_partition(indices, |&i| self.features[i][feature] <= threshold);
        let node_at = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { prob_home: 0.0 }); // placeholder
        let (left_idx, right_idx) = indices.split_at_mut(split_at);
        let left = self.build(left_idx, depth + 1, rng);
        let right = self.build(right_idx, depth + 1, rng);
        self.nodes[node_at] = TreeNode::Split { feature, threshold, left, right };
        node_at
    }
}

/// Stable partition: order within each side is preserved so tree growth is
/// fully deterministic.
fn stable_partition<F: Fn(&usize) -> bool>(indices: &mut [usize], pred: F) -> usize {
    let matched: Vec<usize> = indices.iter().copied().filter(|i| pred(i)).collect();
    let rest: Vec<usize> = indices.iter().copied().filter(|i| !pred(i)).collect();
    let split = matched.len();
    for (slot, v) in indices.iter_mut().zip(matched.into_iter().chain(rest)) {
        *slot = v;
    }
    split
}

/// Train a forest on labeled records. Errors if either class is absent.
pub fn forest_train(records: &[ClusterRecord], cfg: &ForestConfig, seed: u64) -> Result<Forest> {
    let labels: Vec<bool> = records
        .iter()
        .map(|r| {
            r.label
                .ok_or_else(|| Error::Validation(format!("record for {} is unlabeled", r.user_id)))
        })
        .collect::<Result<_>>()?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::Validation(
            "training data must contain both home and non-home records".into(),
        ));
    }
    if cfg.n_trees == 0 || cfg.features_per_split == 0 {
        return Err(Error::Validation("n_trees and features_per_split must be > 0".into()));
    }
    let features: Vec<[f64; FEATURE_COUNT]> = records.iter().map(|r| r.features).collect();

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let tree_seeds: Vec<u64> = (0..cfg.n_trees).map(|_| master.gen()).collect();
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for tree_seed in tree_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(tree_seed);
        let mut bootstrap: Vec<usize> = (0..records.len())
            .map(|_| rng.gen_range(0..records.len()))
            .collect();
        let mut builder = TreeBuilder {
            features: &features,
            labels: &labels,
            cfg,
            nodes: Vec::new(),
        };
        builder.build(&mut bootstrap, 0, &mut rng);
        trees.push(DecisionTree { nodes: builder.nodes });
    }
    Ok(Forest { trees })
}

/// Indices of records that at least one tree votes home on.
pub fn forest_prune(records: &[ClusterRecord], forest: &Forest) -> Vec<usize> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| forest.trees.iter().any(|t| t.votes_home(&r.features)))
        .map(|(i, _)| i)
        .collect()
}
