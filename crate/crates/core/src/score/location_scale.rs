//! Conditional scores under a location-scale model `X = m(Z) + s(Z) eps`:
//! `rho(x, z) = rho_eps((x - m(z)) / s(z)) / s(z)`.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::spline::{fit_spline_score, SplineScoreModel};
use crate::distributions::NoiseFamily;
use crate::error::Result;
use crate::numeric::{mean, population_sd};
use crate::regression::{constant, fit_variance_tree, predict_rows, FittedRegressor, RegressorSpec, TreeParams};

/// A score function of one variable together with its derivative.
pub trait UnivariateScore: Send + Sync {
    fn score(&self, e: f64) -> f64;
    fn derivative(&self, e: f64) -> f64;
}

impl UnivariateScore for SplineScoreModel {
    fn score(&self, e: f64) -> f64 {
        SplineScoreModel::score(self, e)
    }

    fn derivative(&self, e: f64) -> f64 {
        SplineScoreModel::derivative(self, e)
    }
}

impl UnivariateScore for NoiseFamily {
    fn score(&self, e: f64) -> f64 {
        NoiseFamily::score(*self, e)
    }

    fn derivative(&self, e: f64) -> f64 {
        self.score_derivative(e)
    }
}

/// Wraps a pair of closures as a [`UnivariateScore`].
pub struct FnScore<F, G>(pub F, pub G);

impl<F, G> UnivariateScore for FnScore<F, G>
where
    F: Fn(f64) -> f64 + Send + Sync,
    G: Fn(f64) -> f64 + Send + Sync,
{
    fn score(&self, e: f64) -> f64 {
        (self.0)(e)
    }

    fn derivative(&self, e: f64) -> f64 {
        (self.1)(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocationScaleSpec {
    pub mean: RegressorSpec,
    pub scale_tree: TreeParams,
    /// Scale floor as a fraction of `sd(x)`.
    pub scale_floor: f64,
    pub spline_df: f64,
}

impl Default for LocationScaleSpec {
    fn default() -> Self {
        Self {
            mean: RegressorSpec::default(),
            scale_tree: TreeParams::default(),
            scale_floor: 0.01,
            spline_df: 5.0,
        }
    }
}

#[derive(Clone)]
pub struct ConditionalScoreModel {
    pub mean: FittedRegressor,
    pub scale: FittedRegressor,
    pub eps: Arc<dyn UnivariateScore>,
}

impl ConditionalScoreModel {
    /// `rho_eps((x - m(z)) / s(z)) / s(z)`.
    pub fn eval(&self, x: f64, z: &[f64]) -> f64 {
        let s = self.scale.predict(z);
        self.eps.score((x - self.mean.predict(z)) / s) / s
    }

    pub fn scaled_residual(&self, x: f64, z: &[f64]) -> f64 {
        (x - self.mean.predict(z)) / self.scale.predict(z)
    }
}

/// Location-scale model with a known noise law.
pub fn known_family_score(family: NoiseFamily, mean: FittedRegressor, scale: FittedRegressor) -> ConditionalScoreModel {
    ConditionalScoreModel {
        mean,
        scale,
        eps: Arc::new(family),
    }
}

/// Fitted pieces of a location-scale score, with the in-sample scaled
/// residuals the spline was trained on.
pub struct LocationScaleFit {
    pub model: ConditionalScoreModel,
    pub spline: Option<SplineScoreModel>,
    pub scaled_residuals: Vec<f64>,
}

/// Fits the mean by `spec.mean`, the scale by a variance tree on squared
/// in-sample residuals, and the spline score on the scaled residuals.
/// Either nuisance may be supplied instead of fitted.
pub fn fit_location_scale_score_with(
    x: &[f64],
    z: &DMatrix<f64>,
    spec: &LocationScaleSpec,
    seed: u64,
    mean_override: Option<FittedRegressor>,
    scale_override: Option<FittedRegressor>,
    eps_override: Option<Arc<dyn UnivariateScore>>,
) -> Result<LocationScaleFit> {
    let n = x.len();
    let m_hat = match mean_override {
        Some(m) => m,
        None if z.ncols() == 0 => constant(mean(x)),
        None => spec.mean.fit(z, x, seed)?,
    };
    let fitted = predict_rows(m_hat.as_ref(), z);
    let resid: Vec<f64> = (0..n).map(|i| x[i] - fitted[i]).collect();
    let floor = spec.scale_floor * population_sd(x);
    let s_hat: FittedRegressor = match scale_override {
        Some(s) => s,
        None if z.ncols() == 0 => {
            let rms = (resid.iter().map(|r| r * r).sum::<f64>() / n as f64).sqrt();
            constant(rms.max(floor))
        }
        None => {
            let sq: Vec<f64> = resid.iter().map(|r| r * r).collect();
            Arc::new(fit_variance_tree(z, &sq, &spec.scale_tree, floor))
        }
    };
    let scales = predict_rows(s_hat.as_ref(), z);
    let scaled: Vec<f64> = resid.iter().zip(&scales).map(|(r, s)| r / s).collect();
    let (eps, spline): (Arc<dyn UnivariateScore>, _) = match eps_override {
        Some(e) => (e, None),
        None => {
            let fit = fit_spline_score(&scaled, spec.spline_df)?;
            (Arc::new(fit.clone()), Some(fit))
        }
    };
    Ok(LocationScaleFit {
        model: ConditionalScoreModel {
            mean: m_hat,
            scale: s_hat,
            eps,
        },
        spline,
        scaled_residuals: scaled,
    })
}

pub fn fit_location_scale_score(x: &[f64], z: &DMatrix<f64>, spec: &LocationScaleSpec, seed: u64) -> Result<LocationScaleFit> {
    fit_location_scale_score_with(x, z, spec, seed, None, None, None)
}
