//! Histogram gradient boosting with squared-error loss.
//!
//! Every feature is cut into at most `bins` quantile bins whose thresholds sit
//! halfway between neighbouring training values, so a split only depends on
//! the ordering of the training data within a column. Trees are grown depth
//! first; the histogram of the larger child is obtained by subtracting the
//! smaller child's histogram from the parent's.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Regressor;
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub bins: usize,
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            rounds: 300,
            learning_rate: 0.1,
            max_depth: 4,
            min_leaf: 10,
            bins: 256,
            subsample: 1.0,
            seed: 0,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("boosting rounds must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config(format!("learning rate {} outside (0, 1]", self.learning_rate)));
        }
        if self.max_depth == 0 {
            return Err(Error::Config("tree depth must be at least 1".into()));
        }
        if self.min_leaf == 0 {
            return Err(Error::Config("minimum leaf size must be at least 1".into()));
        }
        if !(2..=256).contains(&self.bins) {
            return Err(Error::Config(format!("bin count {} outside [2, 256]", self.bins)));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::Config(format!("subsample {} outside (0, 1]", self.subsample)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
enum Node {
    Split {
        feature: u32,
        bin: u8,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut idx = 0usize;
        loop {
            match self.nodes[idx] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    idx = if row[feature as usize] <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    fn predict_binned(&self, binned: &[u8]) -> f64 {
        let mut idx = 0usize;
        loop {
            match self.nodes[idx] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    bin,
                    left,
                    right,
                    ..
                } => {
                    idx = if binned[feature as usize] <= bin {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    /// Adds this tree's contribution, as a step function of feature `coord`
    /// with the other features taken from `row`, into the difference array
    /// `diff` indexed by cell of `coord`.
    fn accumulate_profile(&self, row: &[f64], coord: usize, cells: usize, diff: &mut [f64]) {
        let mut stack: Vec<(usize, usize, usize)> = vec![(0, 0, cells - 1)];
        while let Some((idx, lo, hi)) = stack.pop() {
            match self.nodes[idx] {
                Node::Leaf(v) => {
                    diff[lo] += v;
                    diff[hi + 1] -= v;
                }
                Node::Split {
                    feature,
                    bin,
                    threshold,
                    left,
                    right,
                } => {
                    if feature as usize == coord {
                        let s = bin as usize;
                        if lo <= s {
                            stack.push((left as usize, lo, hi.min(s)));
                        }
                        if hi > s {
                            stack.push((right as usize, lo.max(s + 1), hi));
                        }
                    } else if row[feature as usize] <= threshold {
                        stack.push((left as usize, lo, hi));
                    } else {
                        stack.push((right as usize, lo, hi));
                    }
                }
            }
        }
    }
}

/// Additive ensemble of depth-limited regression trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    version: u32,
    base: f64,
    thresholds: Vec<Vec<f64>>,
    trees: Vec<Tree>,
}

impl GbtModel {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: GbtModel = serde_json::from_str(text)?;
        if model.version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported model format version {}", model.version)));
        }
        Ok(model)
    }

    fn cell(&self, coord: usize, v: f64) -> usize {
        self.thresholds[coord].partition_point(|t| *t < v)
    }
}

impl Regressor for GbtModel {
    fn predict(&self, row: &[f64]) -> f64 {
        self.trees.iter().fold(self.base, |acc, t| acc + t.predict(row))
    }

    fn predict_along(&self, row: &[f64], coord: usize, values: &[f64], out: &mut [f64]) {
        let cells = self.thresholds[coord].len() + 1;
        let mut diff = vec![0.0; cells + 1];
        for tree in &self.trees {
            tree.accumulate_profile(row, coord, cells, &mut diff);
        }
        let mut acc = 0.0;
        let profile: Vec<f64> = diff[..cells]
            .iter()
            .map(|d| {
                acc += d;
                self.base + acc
            })
            .collect();
        for (v, o) in values.iter().zip(out.iter_mut()) {
            *o = profile[self.cell(coord, *v)];
        }
    }
}

fn quantile_thresholds(column: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = column.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut uniques = sorted.clone();
    uniques.dedup();
    if uniques.len() <= bins {
        return uniques.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    }
    let n = sorted.len();
    let mut cuts: Vec<f64> = Vec::with_capacity(bins - 1);
    for b in 1..bins {
        let pos = b * n / bins;
        if pos == 0 || pos >= n {
            continue;
        }
        let (lo, hi) = (sorted[pos - 1], sorted[pos]);
        if lo < hi {
            let t = 0.5 * (lo + hi);
            if cuts.last().is_none_or(|&last| t > last) {
                cuts.push(t);
            }
        }
    }
    cuts
}

struct Histogram {
    grad: Vec<f64>,
    count: Vec<f64>,
}

impl Histogram {
    fn zeroed(size: usize) -> Self {
        Self {
            grad: vec![0.0; size],
            count: vec![0.0; size],
        }
    }

    fn clear(&mut self) {
        self.grad.iter_mut().for_each(|v| *v = 0.0);
        self.count.iter_mut().for_each(|v| *v = 0.0);
    }
}

struct Grower<'a> {
    params: &'a GbtParams,
    binned: &'a [u8],
    n_features: usize,
    offsets: &'a [usize],
    n_bins: &'a [usize],
    thresholds: &'a [Vec<f64>],
    grad: &'a [f64],
    pool: Vec<Histogram>,
    hist_size: usize,
    nodes: Vec<Node>,
}

struct SplitChoice {
    feature: usize,
    bin: usize,
}

impl<'a> Grower<'a> {
    fn take_hist(&mut self) -> Histogram {
        match self.pool.pop() {
            Some(mut h) => {
                h.clear();
                h
            }
            None => Histogram::zeroed(self.hist_size),
        }
    }

    fn fill_hist(&self, rows: &[u32], hist: &mut Histogram) {
        let f = self.n_features;
        for &r in rows {
            let r = r as usize;
            let g = self.grad[r];
            let bins = &self.binned[r * f..(r + 1) * f];
            for (j, &b) in bins.iter().enumerate() {
                let idx = self.offsets[j] + b as usize;
                hist.grad[idx] += g;
                hist.count[idx] += 1.0;
            }
        }
    }

    fn best_split(&self, hist: &Histogram, total_g: f64, total_n: f64) -> Option<SplitChoice> {
        let min_leaf = self.params.min_leaf as f64;
        let parent = total_g * total_g / total_n;
        let mut best: Option<(f64, SplitChoice)> = None;
        for j in 0..self.n_features {
            let off = self.offsets[j];
            let nb = self.n_bins[j];
            let (mut gl, mut nl) = (0.0, 0.0);
            for s in 0..nb.saturating_sub(1) {
                gl += hist.grad[off + s];
                nl += hist.count[off + s];
                let nr = total_n - nl;
                if nl < min_leaf {
                    continue;
                }
                if nr < min_leaf {
                    break;
                }
                let gr = total_g - gl;
                let gain = gl * gl / nl + gr * gr / nr - parent;
                if gain > 1e-12 && best.as_ref().is_none_or(|(g, _)| gain > *g) {
                    best = Some((gain, SplitChoice { feature: j, bin: s }));
                }
            }
        }
        best.map(|(_, c)| c)
    }

    fn grow(&mut self, rows: &mut [u32], hist: Histogram, depth: usize) -> u32 {
        let total_n = rows.len() as f64;
        let total_g: f64 = rows.iter().map(|&r| self.grad[r as usize]).sum();
        let node_idx = self.nodes.len() as u32;
        let split = if depth < self.params.max_depth && rows.len() >= 2 * self.params.min_leaf {
            self.best_split(&hist, total_g, total_n)
        } else {
            None
        };
        let Some(split) = split else {
            self.nodes.push(Node::Leaf(self.params.learning_rate * total_g / total_n));
            self.pool.push(hist);
            return node_idx;
        };

        // partition rows: left holds bin <= split.bin
        let f = self.n_features;
        let mut boundary = 0;
        for i in 0..rows.len() {
            let r = rows[i] as usize;
            if (self.binned[r * f + split.feature] as usize) <= split.bin {
                rows.swap(i, boundary);
                boundary += 1;
            }
        }
        self.nodes.push(Node::Leaf(0.0));
        let (left_rows, right_rows) = rows.split_at_mut(boundary);

        let mut parent = hist;
        let mut small = self.take_hist();
        let left_is_small = left_rows.len() <= right_rows.len();
        if left_is_small {
            self.fill_hist(left_rows, &mut small);
        } else {
            self.fill_hist(right_rows, &mut small);
        }
        for (p, s) in parent.grad.iter_mut().zip(&small.grad) {
            *p -= s;
        }
        for (p, s) in parent.count.iter_mut().zip(&small.count) {
            *p -= s;
        }
        let (left_hist, right_hist) = if left_is_small { (small, parent) } else { (parent, small) };

        let left = self.grow(left_rows, left_hist, depth + 1);
        let right = self.grow(right_rows, right_hist, depth + 1);
        self.nodes[node_idx as usize] = Node::Split {
            feature: split.feature as u32,
            bin: split.bin as u8,
            threshold: self.thresholds[split.feature][split.bin],
            left,
            right,
        };
        node_idx
    }
}

/// Fits a boosted ensemble of `params.rounds` trees to `(features, targets)`.
pub fn fit_gbt(params: &GbtParams, features: &DMatrix<f64>, targets: &[f64]) -> Result<GbtModel> {
    params.validate()?;
    let n = features.nrows();
    if targets.len() != n {
        return Err(Error::Config(format!("{} targets for {n} rows", targets.len())));
    }
    if n < 2 * params.min_leaf || n == 0 {
        return Err(Error::InsufficientData(format!(
            "{n} rows, boosting needs at least {}",
            2 * params.min_leaf
        )));
    }
    let n_features = features.ncols();
    let thresholds: Vec<Vec<f64>> = (0..n_features)
        .map(|j| {
            let col: Vec<f64> = features.column(j).iter().copied().collect();
            quantile_thresholds(&col, params.bins)
        })
        .collect();
    let n_bins: Vec<usize> = thresholds.iter().map(|t| t.len() + 1).collect();
    let mut offsets = Vec::with_capacity(n_features);
    let mut hist_size = 0;
    for nb in &n_bins {
        offsets.push(hist_size);
        hist_size += nb;
    }
    let mut binned = vec![0u8; n * n_features];
    for j in 0..n_features {
        for i in 0..n {
            binned[i * n_features + j] = thresholds[j].partition_point(|t| *t < features[(i, j)]) as u8;
        }
    }

    let base = targets.iter().sum::<f64>() / n as f64;
    let mut fitted = vec![base; n];
    let mut grad = vec![0.0; n];
    let mut trees = Vec::with_capacity(params.rounds);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let sample_size = ((params.subsample * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut pool = Vec::new();

    if n_features > 0 {
        for _ in 0..params.rounds {
            for i in 0..n {
                grad[i] = targets[i] - fitted[i];
            }
            let mut rows: Vec<u32> = if sample_size < n {
                order.shuffle(&mut rng);
                let mut s = order[..sample_size].to_vec();
                s.sort_unstable();
                s
            } else {
                (0..n as u32).collect()
            };
            let mut grower = Grower {
                params,
                binned: &binned,
                n_features,
                offsets: &offsets,
                n_bins: &n_bins,
                thresholds: &thresholds,
                grad: &grad,
                pool: std::mem::take(&mut pool),
                hist_size,
                nodes: Vec::new(),
            };
            let mut root = grower.take_hist();
            grower.fill_hist(&rows, &mut root);
            grower.grow(&mut rows, root, 0);
            let tree = Tree { nodes: grower.nodes };
            pool = grower.pool;
            for i in 0..n {
                fitted[i] += tree.predict_binned(&binned[i * n_features..(i + 1) * n_features]);
            }
            trees.push(tree);
        }
    }

    Ok(GbtModel {
        version: MODEL_FORMAT_VERSION,
        base,
        thresholds,
        trees,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regression::predict_rows;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_features(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn constant_targets_predict_constant() {
        let x = random_features(100, 3, 1);
        let y = vec![2.5; 100];
        let m = fit_gbt(&GbtParams::default(), &x, &y).unwrap();
        assert!(predict_rows(&m, &x).iter().all(|&p| p == 2.5));
        assert_eq!(m.predict(&[100.0, -100.0, 0.0]), 2.5);
    }

    #[test]
    fn recovers_a_step() {
        let x = random_features(2000, 1, 2);
        let y: Vec<f64> = x.column(0).iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let m = fit_gbt(&GbtParams::default(), &x, &y).unwrap();
        let pred = predict_rows(&m, &x);
        let mse = pred.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64;
        assert!(mse < 0.01, "{mse}");
    }

    #[test]
    fn deterministic_given_seed() {
        let x = random_features(300, 4, 3);
        let y: Vec<f64> = (0..300).map(|i| x[(i, 0)].sin() + x[(i, 2)]).collect();
        let params = GbtParams {
            subsample: 0.7,
            seed: 9,
            rounds: 50,
            ..GbtParams::default()
        };
        let a = predict_rows(&fit_gbt(&params, &x, &y).unwrap(), &x);
        let b = predict_rows(&fit_gbt(&params, &x, &y).unwrap(), &x);
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_rows() {
        let x = random_features(15, 2, 4);
        assert!(matches!(
            fit_gbt(&GbtParams::default(), &x, &[0.0; 15]),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn invariant_under_monotone_feature_transform() {
        let n = 600;
        let x = random_features(n, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y: Vec<f64> = (0..n)
            .map(|i| x[(i, 0)].powi(2) - x[(i, 1)] + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut warped = x.clone();
        for v in warped.column_mut(0).iter_mut() {
            *v = v.exp() * 3.0 + 1.0;
        }
        for v in warped.column_mut(2).iter_mut() {
            *v = v.powi(3);
        }
        let params = GbtParams {
            bins: 32,
            rounds: 80,
            ..GbtParams::default()
        };
        let a = predict_rows(&fit_gbt(&params, &x, &y).unwrap(), &x);
        let b = predict_rows(&fit_gbt(&params, &warped, &y).unwrap(), &warped);
        assert_eq!(a, b);
    }

    #[test]
    fn profile_matches_pointwise_prediction() {
        let n = 400;
        let x = random_features(n, 3, 7);
        let y: Vec<f64> = (0..n).map(|i| (2.0 * x[(i, 0)]).sin() * x[(i, 1)] + x[(i, 2)]).collect();
        let m = fit_gbt(&GbtParams { rounds: 60, ..GbtParams::default() }, &x, &y).unwrap();
        let row = [0.1, -0.4, 0.8];
        let values: Vec<f64> = (0..200).map(|k| -4.0 + 0.04 * k as f64).collect();
        for coord in 0..3 {
            let mut out = vec![0.0; values.len()];
            m.predict_along(&row, coord, &values, &mut out);
            for (v, o) in values.iter().zip(&out) {
                let mut r = row;
                r[coord] = *v;
                assert!((m.predict(&r) - o).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let x = random_features(100, 2, 8);
        let y: Vec<f64> = x.column(0).iter().map(|v| v * 2.0).collect();
        let m = fit_gbt(&GbtParams { rounds: 10, ..GbtParams::default() }, &x, &y).unwrap();
        let back = GbtModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
