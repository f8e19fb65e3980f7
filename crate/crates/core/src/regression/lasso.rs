//! L1-penalised least squares by cyclic coordinate descent.
//!
//! Columns are centred and scaled to unit population standard deviation
//! before fitting, and the intercept is left unpenalised. The objective is
//! `(1/2n) |y - b0 - X b|^2 + lambda |b|_1` on the standardized scale.
//! Constant columns are dropped (coefficient 0).

use nalgebra::{DMatrix, DVector};

use super::Regressor;
use crate::data::make_folds;
use crate::error::Result;

const TOLERANCE: f64 = 1e-7;
const MAX_SWEEPS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct L1Model {
    pub intercept: f64,
    /// Coefficients on the original (unstandardized) columns.
    pub coef: Vec<f64>,
    pub lambda: f64,
    /// Coefficients on the standardized columns.
    pub std_coef: Vec<f64>,
    /// Objective value after each coordinate-descent sweep.
    pub objective_trace: Vec<f64>,
    pub sweeps: usize,
}

impl Regressor for L1Model {
    fn predict(&self, row: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(row).map(|(b, v)| b * v).sum::<f64>()
    }
}

struct Prepared {
    means: Vec<f64>,
    sds: Vec<f64>,
    active: Vec<bool>,
    gram: DMatrix<f64>,
    xty: DVector<f64>,
    y_mean: f64,
    yty: f64,
}

fn prepare(features: &DMatrix<f64>, targets: &[f64]) -> Prepared {
    let (n, k) = features.shape();
    let nf = n as f64;
    let y_mean = targets.iter().sum::<f64>() / nf;
    let mut means = vec![0.0; k];
    let mut sds = vec![1.0; k];
    let mut active = vec![false; k];
    let mut xs = DMatrix::zeros(n, k);
    for j in 0..k {
        let col = features.column(j);
        let mu = col.sum() / nf;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / nf;
        means[j] = mu;
        if var > 1e-24 * (1.0 + mu * mu) {
            let sd = var.sqrt();
            sds[j] = sd;
            active[j] = true;
            for i in 0..n {
                xs[(i, j)] = (features[(i, j)] - mu) / sd;
            }
        }
    }
    let yc = DVector::from_iterator(n, targets.iter().map(|v| v - y_mean));
    let gram = xs.tr_mul(&xs) / nf;
    let xty = xs.tr_mul(&yc) / nf;
    let yty = yc.dot(&yc) / nf;
    Prepared {
        means,
        sds,
        active,
        gram,
        xty,
        y_mean,
        yty,
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn objective(prep: &Prepared, beta: &[f64], lambda: f64) -> f64 {
    let b = DVector::from_column_slice(beta);
    0.5 * prep.yty - b.dot(&prep.xty) + 0.5 * b.dot(&(&prep.gram * &b)) + lambda * beta.iter().map(|v| v.abs()).sum::<f64>()
}

fn descend(prep: &Prepared, lambda: f64, beta: &mut [f64]) -> (Vec<f64>, usize) {
    let k = beta.len();
    // grad[j] = x_j'(y - X b)/n
    let b = DVector::from_column_slice(beta);
    let mut grad: Vec<f64> = (&prep.xty - &prep.gram * &b).iter().copied().collect();
    let mut trace = vec![objective(prep, beta, lambda)];
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..k {
            if !prep.active[j] {
                continue;
            }
            let gjj = prep.gram[(j, j)];
            let new = soft_threshold(beta[j] * gjj + grad[j], lambda) / gjj;
            let delta = new - beta[j];
            if delta != 0.0 {
                for (m, g) in grad.iter_mut().enumerate() {
                    *g -= delta * prep.gram[(m, j)];
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        trace.push(objective(prep, beta, lambda));
        if max_change < TOLERANCE {
            break;
        }
    }
    (trace, sweeps)
}

fn finish(prep: &Prepared, beta: Vec<f64>, lambda: f64, trace: Vec<f64>, sweeps: usize) -> L1Model {
    let coef: Vec<f64> = beta
        .iter()
        .zip(&prep.sds)
        .zip(&prep.active)
        .map(|((b, s), a)| if *a { b / s } else { 0.0 })
        .collect();
    let intercept = prep.y_mean - coef.iter().zip(&prep.means).map(|(c, m)| c * m).sum::<f64>();
    L1Model {
        intercept,
        coef,
        lambda,
        std_coef: beta,
        objective_trace: trace,
        sweeps,
    }
}

/// Lasso fit at a single penalty.
pub fn fit_lasso(features: &DMatrix<f64>, targets: &[f64], lambda: f64) -> L1Model {
    let prep = prepare(features, targets);
    let mut beta = vec![0.0; features.ncols()];
    let (trace, sweeps) = descend(&prep, lambda, &mut beta);
    finish(&prep, beta, lambda, trace, sweeps)
}

/// Fits a decreasing sequence of penalties with warm starts.
pub fn fit_lasso_path(features: &DMatrix<f64>, targets: &[f64], lambdas: &[f64]) -> Vec<L1Model> {
    let prep = prepare(features, targets);
    let mut beta = vec![0.0; features.ncols()];
    lambdas
        .iter()
        .map(|&lambda| {
            let (trace, sweeps) = descend(&prep, lambda, &mut beta);
            finish(&prep, beta.clone(), lambda, trace, sweeps)
        })
        .collect()
}

/// Smallest penalty at which every standardized coefficient is zero.
pub fn lambda_max(features: &DMatrix<f64>, targets: &[f64]) -> f64 {
    let prep = prepare(features, targets);
    prep.xty
        .iter()
        .zip(&prep.active)
        .filter(|(_, a)| **a)
        .map(|(v, _)| v.abs())
        .fold(0.0, f64::max)
}

/// Log-spaced grid of `count` penalties from `lambda_max` down to
/// `lambda_max * min_ratio`.
pub fn lambda_grid(lambda_max: f64, count: usize, min_ratio: f64) -> Vec<f64> {
    if count == 1 {
        return vec![lambda_max];
    }
    (0..count)
        .map(|i| lambda_max * min_ratio.powf(i as f64 / (count - 1) as f64))
        .collect()
}

/// K-fold cross-validated penalty over a 50-point log grid spanning four
/// decades below `lambda_max`.
pub fn lasso_cv_lambda(features: &DMatrix<f64>, targets: &[f64], k: usize, seed: u64) -> Result<f64> {
    let lambdas = lambda_grid(lambda_max(features, targets), 50, 1e-4);
    let folds = make_folds(targets.len(), k, seed)?;
    let mut sse = vec![0.0; lambdas.len()];
    for fold in 0..k {
        let train = folds.out_of_fold(fold);
        let test = folds.in_fold(fold);
        let xt = features.select_rows(train.iter());
        let yt: Vec<f64> = train.iter().map(|&i| targets[i]).collect();
        let path = fit_lasso_path(&xt, &yt, &lambdas);
        for (l, model) in path.iter().enumerate() {
            for &i in &test {
                let row: Vec<f64> = features.row(i).iter().copied().collect();
                let e = targets[i] - model.predict(&row);
                sse[l] += e * e;
            }
        }
    }
    let best = (0..lambdas.len())
        .min_by(|&a, &b| sse[a].total_cmp(&sse[b]))
        .unwrap_or(0);
    Ok(lambdas[best])
}
