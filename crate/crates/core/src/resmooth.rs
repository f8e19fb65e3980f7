//! Gaussian resmoothing of arbitrary regressors by grid quadrature, the
//! cross-validated bandwidth rule, and the central-difference comparator.
//!
//! Quadrature sums are always taken over mirrored node pairs so that odd
//! moments of the grid vanish exactly in floating point.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::data::{Dataset, FoldPartition};
use crate::error::{Error, Result};
use crate::numeric::{derive_seed, population_sd};
use crate::regression::{FittedRegressor, RegressorSpec};

/// Symmetric equally spaced nodes with normal-density weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureGrid {
    pub fn new(points: usize, span: f64) -> Result<Self> {
        if points < 3 || points.is_multiple_of(2) {
            return Err(Error::Config(format!("quadrature size must be odd and at least 3, got {points}")));
        }
        if !(span > 0.0 && span.is_finite()) {
            return Err(Error::Config(format!("quadrature span must be positive, got {span}")));
        }
        let mid = points / 2;
        let mut nodes = vec![0.0; points];
        for k in 1..=mid {
            let w = span * k as f64 / mid as f64;
            nodes[mid + k] = w;
            nodes[mid - k] = -w;
        }
        let raw: Vec<f64> = nodes.iter().map(|w| (-0.5 * w * w).exp()).collect();
        let total = raw[mid] + 2.0 * (1..=mid).map(|k| raw[mid + k]).sum::<f64>();
        let weights = raw.iter().map(|r| r / total).collect();
        Ok(Self { nodes, weights })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn mid(&self) -> usize {
        self.nodes.len() / 2
    }

    /// `sum_j q_j g_j` where `values[j]` is `g` at node `j`.
    pub fn expectation(&self, values: &[f64]) -> f64 {
        let m = self.mid();
        let mut acc = self.weights[m] * values[m];
        for k in 1..=m {
            acc += self.weights[m + k] * (values[m + k] + values[m - k]);
        }
        acc
    }

    /// `sum_j q_j w_j g_j`.
    pub fn first_moment_of(&self, values: &[f64]) -> f64 {
        let m = self.mid();
        let mut acc = 0.0;
        for k in 1..=m {
            acc += self.weights[m + k] * self.nodes[m + k] * (values[m + k] - values[m - k]);
        }
        acc
    }

    /// `sum_j q_j w_j^k`; exactly zero for odd `k`.
    pub fn moment(&self, k: u32) -> f64 {
        let powers: Vec<f64> = self.nodes.iter().map(|w| w.powi(k as i32)).collect();
        self.expectation(&powers)
    }

    /// Evaluation points `x + h w_j`, written into `out`.
    pub fn shifted(&self, x: f64, h: f64, out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(&self.nodes) {
            *o = x + h * w;
        }
    }
}

/// A fitted regressor smoothed along each exposure coordinate separately.
/// Exposure `j` sits at position `j` of the feature row.
#[derive(Clone)]
pub struct SmoothedModel {
    pub base: FittedRegressor,
    pub bandwidths: Vec<f64>,
    pub grid: Arc<QuadratureGrid>,
}

impl SmoothedModel {
    pub fn new(base: FittedRegressor, bandwidths: Vec<f64>, grid: Arc<QuadratureGrid>) -> Result<Self> {
        if let Some(h) = bandwidths.iter().find(|h| !(**h > 0.0)) {
            return Err(Error::Config(format!("bandwidth {h} is not positive")));
        }
        Ok(Self { base, bandwidths, grid })
    }

    fn base_along(&self, row: &[f64], coord: usize) -> Vec<f64> {
        let mut points = vec![0.0; self.grid.len()];
        self.grid.shifted(row[coord], self.bandwidths[coord], &mut points);
        let mut values = vec![0.0; points.len()];
        self.base.predict_along(row, coord, &points, &mut values);
        values
    }

    /// Prediction smoothed along coordinate `coord`.
    pub fn value(&self, row: &[f64], coord: usize) -> f64 {
        self.grid.expectation(&self.base_along(row, coord))
    }

    /// Partial derivative in coordinate `coord` of the smoothed prediction.
    pub fn derivative(&self, row: &[f64], coord: usize) -> f64 {
        self.grid.first_moment_of(&self.base_along(row, coord)) / self.bandwidths[coord]
    }

    pub fn value_and_derivative(&self, row: &[f64], coord: usize) -> (f64, f64) {
        let values = self.base_along(row, coord);
        (
            self.grid.expectation(&values),
            self.grid.first_moment_of(&values) / self.bandwidths[coord],
        )
    }
}

/// `(f(x + D/2) - f(x - D/2)) / D` along coordinate `coord`.
pub fn diff_derivative(base: &dyn crate::regression::Regressor, row: &[f64], coord: usize, step: f64) -> f64 {
    let x = row[coord];
    let mut out = [0.0; 2];
    base.predict_along(row, coord, &[x + 0.5 * step, x - 0.5 * step], &mut out);
    (out[0] - out[1]) / step
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandwidthSelection {
    pub candidates: Vec<f64>,
    /// Mean squared error of the unsmoothed model.
    pub cv_zero: f64,
    /// Mean squared error per candidate.
    pub cv: Vec<f64>,
    /// Zero when the unsmoothed model had the smallest error.
    pub h_min: f64,
    /// Standard error per candidate, `None` below `h_min`.
    pub se: Vec<Option<f64>>,
    pub chosen: f64,
    pub fallback: bool,
}

/// Squared in-fold errors of the unsmoothed and smoothed predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthErrors {
    pub zero: Vec<f64>,
    /// `by_h[l][i]`: error of observation `i` at candidate `l`.
    pub by_h: Vec<Vec<f64>>,
}

/// The selection rule on precomputed squared errors.
pub fn choose_bandwidth(candidates: &[f64], errors: &BandwidthErrors, tol: f64) -> Result<BandwidthSelection> {
    if candidates.is_empty() {
        return Err(Error::Config("empty bandwidth set".into()));
    }
    if candidates.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::Config("bandwidths must be positive".into()));
    }
    if !(tol >= 0.0) {
        return Err(Error::Config("tolerance must be non-negative".into()));
    }
    if errors.by_h.len() != candidates.len() {
        return Err(Error::Config("one error vector per bandwidth required".into()));
    }
    let n = errors.zero.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let cv_zero = mean(&errors.zero);
    let cv: Vec<f64> = errors.by_h.iter().map(|e| mean(e)).collect();

    // argmin over {0} followed by H; the first minimiser wins ties
    let mut best: Option<usize> = None;
    let mut best_cv = cv_zero;
    for (l, c) in cv.iter().enumerate() {
        if *c < best_cv {
            best_cv = *c;
            best = Some(l);
        }
    }
    let (h_min, err_min) = match best {
        None => (0.0, &errors.zero),
        Some(l) => (candidates[l], &errors.by_h[l]),
    };

    let mut se = vec![None; candidates.len()];
    let mut chosen: Option<f64> = None;
    for (l, &h) in candidates.iter().enumerate() {
        if h < h_min {
            continue;
        }
        let diffs: Vec<f64> = err_min.iter().zip(&errors.by_h[l]).map(|(a, b)| a - b).collect();
        let s = population_sd(&diffs) / n.sqrt();
        se[l] = Some(s);
        if cv[l] <= best_cv + tol * s && chosen.is_none_or(|c| h > c) {
            chosen = Some(h);
        }
    }
    let fallback = chosen.is_none();
    let chosen = chosen.unwrap_or_else(|| candidates.iter().copied().fold(f64::INFINITY, f64::min));
    Ok(BandwidthSelection {
        candidates: candidates.to_vec(),
        cv_zero,
        cv,
        h_min,
        se,
        chosen,
        fallback,
    })
}

/// In-fold squared errors at every candidate bandwidth, using one fitted
/// model per fold (trained without that fold).
pub fn bandwidth_cv_errors(
    models: &[FittedRegressor],
    folds: &FoldPartition,
    features: &DMatrix<f64>,
    y: &[f64],
    coord: usize,
    candidates: &[f64],
    grid: &QuadratureGrid,
) -> BandwidthErrors {
    let n = y.len();
    let big_j = grid.len();
    let mut zero = vec![0.0; n];
    let mut by_h = vec![vec![0.0; n]; candidates.len()];
    let mut points = vec![0.0; 1 + big_j * candidates.len()];
    let mut values = vec![0.0; points.len()];
    let mut row = vec![0.0; features.ncols()];
    for i in 0..n {
        let model = &models[folds.assignment()[i]];
        for (j, r) in row.iter_mut().enumerate() {
            *r = features[(i, j)];
        }
        let x = row[coord];
        points[0] = x;
        for (l, &h) in candidates.iter().enumerate() {
            grid.shifted(x, h, &mut points[1 + l * big_j..1 + (l + 1) * big_j]);
        }
        model.predict_along(&row, coord, &points, &mut values);
        let e0 = y[i] - values[0];
        zero[i] = e0 * e0;
        for (l, errs) in by_h.iter_mut().enumerate() {
            let e = y[i] - grid.expectation(&values[1 + l * big_j..1 + (l + 1) * big_j]);
            errs[i] = e * e;
        }
    }
    BandwidthErrors { zero, by_h }
}

/// Fits the outcome learner once per fold and runs the selection rule for
/// exposure `coord`.
pub fn select_bandwidth(
    ds: &Dataset,
    folds: &FoldPartition,
    spec: &RegressorSpec,
    candidates: &[f64],
    tol: f64,
    grid: &QuadratureGrid,
    seed: u64,
    coord: usize,
) -> Result<BandwidthSelection> {
    if candidates.is_empty() {
        return Err(Error::Config("empty bandwidth set".into()));
    }
    let features = ds.features();
    let models = (0..folds.k())
        .map(|k| {
            let train = folds.out_of_fold(k);
            let xt = features.select_rows(train.iter());
            let yt: Vec<f64> = train.iter().map(|&i| ds.y[i]).collect();
            spec.fit(&xt, &yt, derive_seed(seed, k as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let errors = bandwidth_cv_errors(&models, folds, &features, &ds.y, coord, candidates, grid);
    choose_bandwidth(candidates, &errors, tol)
}
