//! Cross-fitted doubly robust estimation of the average partial effect and
//! the comparator estimators.
//!
//! Every estimator here averages a per-observation influence value computed
//! with nuisance models that were fitted without that observation's fold.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Dataset, FoldPartition};
use crate::error::{Error, Result};
use crate::numeric::{derive_seed, normal_quantile, population_sd};
use crate::regression::{
    constant, fit_ols, lasso_cv_lambda, predict_rows, FittedRegressor, Regressor, RegressorSpec,
};
use crate::resmooth::{bandwidth_cv_errors, choose_bandwidth, diff_derivative, BandwidthSelection, QuadratureGrid, SmoothedModel};
use crate::score::basis::basis_matrix;
use crate::score::{fit_basis_score, fit_location_scale_score_with, LocationScaleSpec, UnivariateScore};

const OUTCOME_STREAM: u64 = 1;
const EXPOSURE_STREAM: u64 = 1_000;
const CONTROLS_STREAM: u64 = 2_000;
const LASSO_STREAM: u64 = 3_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Drape,
    Diffbasis,
    Plr,
    Ols,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Drape => "drape",
            Method::Diffbasis => "diffbasis",
            Method::Plr => "plr",
            Method::Ols => "ols",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drape" => Ok(Method::Drape),
            "diffbasis" => Ok(Method::Diffbasis),
            "plr" => Ok(Method::Plr),
            "ols" => Ok(Method::Ols),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Point estimate, covariance of `sqrt(n) (theta_hat - theta)` and normal
/// confidence intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApeEstimate {
    pub method: String,
    pub n: usize,
    pub d: usize,
    pub theta: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub ci: Vec<[f64; 2]>,
    pub alpha: f64,
    pub seed: u64,
    pub config_digest: String,
}

impl ApeEstimate {
    pub fn new(method: &str, n: usize, theta: Vec<f64>, sigma: Vec<Vec<f64>>, alpha: f64, seed: u64) -> Self {
        let z = normal_quantile(1.0 - alpha / 2.0);
        let ci = theta
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let half = z * (sigma[j][j].max(0.0) / n as f64).sqrt();
                [t - half, t + half]
            })
            .collect();
        Self {
            method: method.to_string(),
            n,
            d: theta.len(),
            theta,
            sigma,
            ci,
            alpha,
            seed,
            config_digest: String::new(),
        }
    }

    /// Estimate from per-observation influence rows: `theta` is their mean
    /// and `sigma` their covariance with divisor `n`.
    pub fn from_influence(method: &str, psi: &[Vec<f64>], alpha: f64, seed: u64) -> Self {
        let n = psi.len();
        let d = psi.first().map_or(0, |r| r.len());
        let theta: Vec<f64> = (0..d).map(|j| psi.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let mut sigma = vec![vec![0.0; d]; d];
        for row in psi {
            for a in 0..d {
                for b in 0..d {
                    sigma[a][b] += (row[a] - theta[a]) * (row[b] - theta[b]);
                }
            }
        }
        for r in sigma.iter_mut() {
            for v in r.iter_mut() {
                *v /= n as f64;
            }
        }
        Self::new(method, n, theta, sigma, alpha, seed)
    }

    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.d).map(|j| (self.sigma[j][j].max(0.0) / self.n as f64).sqrt()).collect()
    }

    pub fn covers(&self, j: usize, value: f64) -> bool {
        self.ci[j][0] <= value && value <= self.ci[j][1]
    }

    /// Smallest eigenvalue of `sigma`, reported as a diagnostic.
    pub fn min_eigenvalue(&self) -> f64 {
        let m = DMatrix::from_fn(self.d, self.d, |a, b| self.sigma[a][b]);
        SymmetricEigen::new(m).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Per-observation quantities behind an estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceRecord {
    /// `psi[i][j]`: influence value of observation `i` for exposure `j`.
    pub psi: Vec<Vec<f64>>,
    /// Out-of-fold plug-in regression prediction at each observation.
    pub base_predictions: Vec<f64>,
    /// Bandwidth selection per exposure (resmoothing only).
    pub bandwidths: Vec<BandwidthSelection>,
}

pub type GradientFn = Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>;
pub type ScoreFn = Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>;

/// Replacements for fitted nuisances. Functions receive the full feature
/// row `(x, z)` and the exposure index.
#[derive(Clone, Default)]
pub struct Overrides {
    /// Plug-in regression used in place of the fitted learner.
    pub regression: Option<FittedRegressor>,
    /// Gradient of the regression; when present no smoothing is applied and
    /// the plug-in regression is used unsmoothed.
    pub gradient: Option<GradientFn>,
    /// Complete conditional score.
    pub score: Option<ScoreFn>,
    /// Location, scale and noise score of the location-scale model; they
    /// act on the exposure's controls rather than the full row.
    pub mean: Option<FittedRegressor>,
    pub scale: Option<FittedRegressor>,
    pub eps: Option<Arc<dyn UnivariateScore>>,
}

fn location_scale_spec(cfg: &RunConfig) -> LocationScaleSpec {
    LocationScaleSpec {
        mean: cfg.exposure.clone(),
        scale_tree: cfg.scale_tree.clone(),
        scale_floor: cfg.scale_floor,
        spline_df: cfg.spline_df,
    }
}

fn check_folds(ds: &Dataset, folds: &FoldPartition) -> Result<()> {
    if folds.n() != ds.n() {
        return Err(Error::Config(format!("fold partition covers {} rows, data has {}", folds.n(), ds.n())));
    }
    if folds.sizes().contains(&0) {
        return Err(Error::InsufficientData("empty fold".into()));
    }
    Ok(())
}

fn fit_on_rows(spec: &RegressorSpec, features: &DMatrix<f64>, targets: &[f64], rows: &[usize], seed: u64) -> Result<FittedRegressor> {
    let xt = features.select_rows(rows.iter());
    let yt: Vec<f64> = rows.iter().map(|&i| targets[i]).collect();
    spec.fit(&xt, &yt, seed)
}

/// Outcome models, one per fold, each trained without its fold.
fn outcome_models(ds: &Dataset, folds: &FoldPartition, cfg: &RunConfig, overrides: &Overrides) -> Result<Vec<FittedRegressor>> {
    if let Some(f) = &overrides.regression {
        return Ok(vec![f.clone(); folds.k()]);
    }
    let features = ds.features();
    (0..folds.k())
        .into_par_iter()
        .map(|k| {
            fit_on_rows(
                &cfg.outcome,
                &features,
                &ds.y,
                &folds.out_of_fold(k),
                derive_seed(cfg.seed, OUTCOME_STREAM + k as u64),
            )
        })
        .collect()
}

fn base_predictions(models: &[FittedRegressor], folds: &FoldPartition, ds: &Dataset) -> Vec<f64> {
    (0..ds.n())
        .map(|i| models[folds.assignment()[i]].predict(&ds.feature_row(i)))
        .collect()
}

fn row_of(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// The resmoothed plug-in with location-scale spline scores.
pub fn drape_estimate(ds: &Dataset, folds: &FoldPartition, cfg: &RunConfig) -> Result<(ApeEstimate, InfluenceRecord)> {
    drape_estimate_with(ds, folds, cfg, &Overrides::default())
}

pub fn drape_estimate_with(
    ds: &Dataset,
    folds: &FoldPartition,
    cfg: &RunConfig,
    overrides: &Overrides,
) -> Result<(ApeEstimate, InfluenceRecord)> {
    cfg.validate()?;
    check_folds(ds, folds)?;
    let (n, d) = (ds.n(), ds.d());
    let features = ds.features();
    let models = outcome_models(ds, folds, cfg, overrides)?;

    // conditional score models per (fold, exposure)
    let ls_spec = location_scale_spec(cfg);
    let controls: Vec<DMatrix<f64>> = (0..d).map(|j| ds.exposure_controls(j)).collect();
    let scores = if overrides.score.is_some() {
        Vec::new()
    } else {
        (0..folds.k() * d)
            .into_par_iter()
            .map(|t| {
                let (k, j) = (t / d, t % d);
                let train = folds.out_of_fold(k);
                let x: Vec<f64> = train.iter().map(|&i| ds.x[(i, j)]).collect();
                let z = controls[j].select_rows(train.iter());
                fit_location_scale_score_with(
                    &x,
                    &z,
                    &ls_spec,
                    derive_seed(cfg.seed, EXPOSURE_STREAM + t as u64),
                    overrides.mean.clone(),
                    overrides.scale.clone(),
                    overrides.eps.clone(),
                )
                .map(|fit| fit.model)
            })
            .collect::<Result<Vec<_>>>()?
    };

    // bandwidths from the same partition and the same outcome models
    let grid = Arc::new(QuadratureGrid::new(cfg.quadrature.points, cfg.quadrature.span)?);
    let mut selections = Vec::new();
    let smoothers: Option<Vec<SmoothedModel>> = if overrides.gradient.is_some() {
        None
    } else {
        let mut hs = Vec::with_capacity(d);
        for j in 0..d {
            let candidates = cfg.bandwidth.candidates(population_sd(&ds.x_column(j)));
            let errors = bandwidth_cv_errors(&models, folds, &features, &ds.y, j, &candidates, &grid);
            let sel = choose_bandwidth(&candidates, &errors, cfg.bandwidth.tol)?;
            hs.push(sel.chosen);
            selections.push(sel);
        }
        Some(
            models
                .iter()
                .map(|m| SmoothedModel::new(m.clone(), hs.clone(), grid.clone()))
                .collect::<Result<_>>()?,
        )
    };

    let psi: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let k = folds.assignment()[i];
            let row = row_of(&features, i);
            (0..d)
                .map(|j| {
                    let (value, grad) = match (&smoothers, &overrides.gradient) {
                        (Some(sm), _) => sm[k].value_and_derivative(&row, j),
                        (None, Some(g)) => (models[k].predict(&row), g(&row, j)),
                        (None, None) => unreachable!(),
                    };
                    let rho = match &overrides.score {
                        Some(s) => s(&row, j),
                        None => scores[k * d + j].eval(row[j], &row_of(&controls[j], i)),
                    };
                    grad - rho * (ds.y[i] - value)
                })
                .collect()
        })
        .collect();

    let estimate = ApeEstimate::from_influence(Method::Drape.name(), &psi, cfg.alpha, cfg.seed);
    let record = InfluenceRecord {
        base_predictions: base_predictions(&models, folds, ds),
        psi,
        bandwidths: selections,
    };
    Ok((estimate, record))
}

/// Central-difference derivative of the unsmoothed plug-in with the lasso
/// quadratic-basis score.
pub fn difference_basis_estimate(ds: &Dataset, folds: &FoldPartition, cfg: &RunConfig) -> Result<(ApeEstimate, InfluenceRecord)> {
    cfg.validate()?;
    check_folds(ds, folds)?;
    if ds.d() != 1 {
        return Err(Error::Config("the difference-basis comparator needs a single exposure".into()));
    }
    let n = ds.n();
    let features = ds.features();
    let models = outcome_models(ds, folds, cfg, &Overrides::default())?;
    let x = ds.x_column(0);
    let step = population_sd(&x) / 4.0;

    let scores = (0..folds.k())
        .into_par_iter()
        .map(|k| {
            let train = folds.out_of_fold(k);
            let xt: Vec<f64> = train.iter().map(|&i| x[i]).collect();
            let zt = ds.z.select_rows(train.iter());
            let lambda = match cfg.basis_lambda {
                Some(l) => l,
                None => lasso_cv_lambda(
                    &basis_matrix(&xt, &zt),
                    &xt,
                    cfg.folds,
                    derive_seed(cfg.seed, LASSO_STREAM + k as u64),
                )?,
            };
            fit_basis_score(&xt, &zt, lambda)
        })
        .collect::<Result<Vec<_>>>()?;

    let psi: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let k = folds.assignment()[i];
            let row = row_of(&features, i);
            let value = models[k].predict(&row);
            let grad = diff_derivative(models[k].as_ref(), &row, 0, step);
            let rho = scores[k].eval(x[i], &row_of(&ds.z, i));
            vec![grad - rho * (ds.y[i] - value)]
        })
        .collect();
    let estimate = ApeEstimate::from_influence(Method::Diffbasis.name(), &psi, cfg.alpha, cfg.seed);
    let record = InfluenceRecord {
        base_predictions: base_predictions(&models, folds, ds),
        psi,
        bandwidths: Vec::new(),
    };
    Ok((estimate, record))
}

/// Nuisance replacements for the partially linear comparator.
#[derive(Clone, Default)]
pub struct PlrOverrides {
    /// `E[Y | Z]`.
    pub outcome: Option<FittedRegressor>,
    /// `E[X | Z]`.
    pub exposure: Option<FittedRegressor>,
}

/// Cross-fitted partialling-out estimator of the partially linear
/// coefficient.
pub fn plr_estimate(ds: &Dataset, folds: &FoldPartition, cfg: &RunConfig) -> Result<(ApeEstimate, InfluenceRecord)> {
    plr_estimate_with(ds, folds, cfg, &PlrOverrides::default())
}

pub fn plr_estimate_with(
    ds: &Dataset,
    folds: &FoldPartition,
    cfg: &RunConfig,
    overrides: &PlrOverrides,
) -> Result<(ApeEstimate, InfluenceRecord)> {
    cfg.validate()?;
    check_folds(ds, folds)?;
    if ds.d() != 1 {
        return Err(Error::Config("the partially linear comparator needs a single exposure".into()));
    }
    let n = ds.n();
    let x = ds.x_column(0);
    let fit = |spec: &RegressorSpec, target: &[f64], given: &Option<FittedRegressor>, stream: u64| -> Result<Vec<FittedRegressor>> {
        if let Some(f) = given {
            return Ok(vec![f.clone(); folds.k()]);
        }
        (0..folds.k())
            .into_par_iter()
            .map(|k| {
                let train = folds.out_of_fold(k);
                if ds.p() == 0 {
                    let m = train.iter().map(|&i| target[i]).sum::<f64>() / train.len() as f64;
                    return Ok(constant(m));
                }
                fit_on_rows(spec, &ds.z, target, &train, derive_seed(cfg.seed, stream + k as u64))
            })
            .collect()
    };
    let ell = fit(&cfg.response_on_controls, &ds.y, &overrides.outcome, CONTROLS_STREAM)?;
    let m = fit(&cfg.exposure, &x, &overrides.exposure, EXPOSURE_STREAM)?;

    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    for i in 0..n {
        let k = folds.assignment()[i];
        let z = row_of(&ds.z, i);
        u[i] = ds.y[i] - ell[k].predict(&z);
        v[i] = x[i] - m[k].predict(&z);
    }
    let svv: f64 = v.iter().map(|a| a * a).sum();
    if !(svv > 0.0) {
        return Err(Error::DegenerateExposure);
    }
    let theta = v.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() / svv;
    let jac = svv / n as f64;
    let psi: Vec<Vec<f64>> = (0..n).map(|i| vec![(u[i] - theta * v[i]) * v[i] / jac]).collect();
    let var = psi.iter().map(|r| r[0] * r[0]).sum::<f64>() / n as f64;
    let estimate = ApeEstimate::new(Method::Plr.name(), n, vec![theta], vec![vec![var]], cfg.alpha, cfg.seed);
    let base = (0..n)
        .map(|i| ell[folds.assignment()[i]].predict(&row_of(&ds.z, i)))
        .collect();
    Ok((
        estimate,
        InfluenceRecord {
            psi,
            base_predictions: base,
            bandwidths: Vec::new(),
        },
    ))
}

/// Least-squares coefficient on the exposure in `y ~ 1 + x + z`, with the
/// HC0 sandwich variance.
pub fn ols_ape(ds: &Dataset, alpha: f64, seed: u64) -> Result<ApeEstimate> {
    if ds.d() != 1 {
        return Err(Error::Config("the OLS comparator needs a single exposure".into()));
    }
    let (n, p) = (ds.n(), ds.p());
    let design = DMatrix::from_fn(n, p + 2, |i, j| match j {
        0 => 1.0,
        1 => ds.x[(i, 0)],
        _ => ds.z[(i, j - 2)],
    });
    let fit = fit_ols(&design, &ds.y)?;
    let var = fit.cov[(1, 1)] * n as f64;
    Ok(ApeEstimate::new(Method::Ols.name(), n, vec![fit.coef[1]], vec![vec![var]], alpha, seed))
}

/// Dispatches on `method` with the given folds.
pub fn estimate(method: Method, ds: &Dataset, folds: &FoldPartition, cfg: &RunConfig) -> Result<ApeEstimate> {
    match method {
        Method::Drape => drape_estimate(ds, folds, cfg).map(|r| r.0),
        Method::Diffbasis => difference_basis_estimate(ds, folds, cfg).map(|r| r.0),
        Method::Plr => plr_estimate(ds, folds, cfg).map(|r| r.0),
        Method::Ols => ols_ape(ds, cfg.alpha, cfg.seed),
    }
}

/// Predictions of `model` on `features`, exposed for diagnostics.
pub fn fitted_values(model: &dyn Regressor, features: &DMatrix<f64>) -> Vec<f64> {
    predict_rows(model, features)
}
