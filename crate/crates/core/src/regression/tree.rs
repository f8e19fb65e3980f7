//! Exact-split CART regression trees and the floored conditional scale model
//! built on them.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::Regressor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// A split is kept only if the two-sample statistic
    /// `|mean_l - mean_r| / sqrt(v (1/n_l + 1/n_r))`, with `v` the node
    /// variance, reaches this value. Zero grows plain CART.
    pub min_split_stat: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: 3,
            min_leaf: 50,
            min_split_stat: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(f64),
}

/// Binary tree with variance-reduction splits and leaf means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn fit(features: &DMatrix<f64>, targets: &[f64], params: &TreeParams) -> Self {
        let mut tree = RegressionTree { nodes: Vec::new() };
        let mut rows: Vec<usize> = (0..targets.len()).collect();
        tree.grow(features, targets, &mut rows, params, 0);
        tree
    }

    fn grow(
        &mut self,
        features: &DMatrix<f64>,
        targets: &[f64],
        rows: &mut [usize],
        params: &TreeParams,
        depth: usize,
    ) -> usize {
        let idx = self.nodes.len();
        let n = rows.len();
        let mean = if n == 0 {
            0.0
        } else {
            rows.iter().map(|&r| targets[r]).sum::<f64>() / n as f64
        };
        let split = if depth < params.max_depth && n >= 2 * params.min_leaf.max(1) {
            best_split(features, targets, rows, params.min_leaf.max(1), params.min_split_stat)
        } else {
            None
        };
        let Some((feature, threshold)) = split else {
            self.nodes.push(Node::Leaf(mean));
            return idx;
        };
        self.nodes.push(Node::Leaf(mean));
        rows.sort_by(|&a, &b| features[(a, feature)].total_cmp(&features[(b, feature)]).then(a.cmp(&b)));
        let boundary = rows.partition_point(|&r| features[(r, feature)] <= threshold);
        let (l, r) = rows.split_at_mut(boundary);
        let left = self.grow(features, targets, l, params, depth + 1);
        let right = self.grow(features, targets, r, params, depth + 1);
        self.nodes[idx] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        idx
    }

    /// Feature index and threshold of the root split, if any.
    pub fn root_split(&self) -> Option<(usize, f64)> {
        match self.nodes.first() {
            Some(Node::Split { feature, threshold, .. }) => Some((*feature, *threshold)),
            _ => None,
        }
    }

    pub fn leaf_values(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf(v) => Some(*v),
                _ => None,
            })
            .collect()
    }
}

fn best_split(
    features: &DMatrix<f64>,
    targets: &[f64],
    rows: &[usize],
    min_leaf: usize,
    min_stat: f64,
) -> Option<(usize, f64)> {
    let n = rows.len();
    let total: f64 = rows.iter().map(|&r| targets[r]).sum();
    let parent = total * total / n as f64;
    let sum_sq: f64 = rows.iter().map(|&r| targets[r] * targets[r]).sum();
    let node_var = (sum_sq - parent) / n as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order = rows.to_vec();
    for j in 0..features.ncols() {
        order.sort_by(|&a, &b| features[(a, j)].total_cmp(&features[(b, j)]).then(a.cmp(&b)));
        let mut left = 0.0;
        for k in 0..n - 1 {
            left += targets[order[k]];
            let nl = k + 1;
            let nr = n - nl;
            if nl < min_leaf {
                continue;
            }
            if nr < min_leaf {
                break;
            }
            let (a, b) = (features[(order[k], j)], features[(order[k + 1], j)]);
            if a == b {
                continue;
            }
            let right = total - left;
            let gain = left * left / nl as f64 + right * right / nr as f64 - parent;
            if gain > 1e-12 * parent.abs().max(1e-300) && best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, j, 0.5 * (a + b)));
            }
        }
    }
    // gain / v is the squared two-sample statistic of the split
    best.filter(|(gain, _, _)| min_stat <= 0.0 || (node_var > 0.0 && gain / node_var >= min_stat * min_stat))
        .map(|(_, j, t)| (j, t))
}

impl Regressor for RegressionTree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => idx = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }
}

/// Conditional standard deviation estimate: the square root of a tree fit to
/// squared residuals, floored at `floor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleModel {
    pub tree: RegressionTree,
    pub floor: f64,
}

impl Regressor for ScaleModel {
    fn predict(&self, row: &[f64]) -> f64 {
        self.tree.predict(row).max(self.floor * self.floor).sqrt()
    }
}

/// Fits [`ScaleModel`] on `z` against squared residuals.
pub fn fit_variance_tree(z: &DMatrix<f64>, squared_residuals: &[f64], params: &TreeParams, floor: f64) -> ScaleModel {
    debug_assert!(squared_residuals.iter().all(|v| *v >= 0.0));
    ScaleModel {
        tree: RegressionTree::fit(z, squared_residuals, params),
        floor,
    }
}
