//! Plug-in nuisance learners: histogram gradient boosting, OLS, CART
//! scale trees and coordinate-descent lasso.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub mod gbt;
pub mod lasso;
pub mod ols;
pub mod tree;

pub use gbt::{fit_gbt, GbtModel, GbtParams};
pub use lasso::{fit_lasso, lasso_cv_lambda, L1Model};
pub use ols::{fit_ols, OlsFit};
pub use tree::{fit_variance_tree, RegressionTree, ScaleModel, TreeParams};

/// A fitted prediction function over a feature row.
pub trait Regressor: Send + Sync {
    fn predict(&self, row: &[f64]) -> f64;

    /// Evaluates the model at `row` with coordinate `coord` replaced by each
    /// entry of `values`. Models with axis-aligned structure override this
    /// to avoid repeated full evaluations.
    fn predict_along(&self, row: &[f64], coord: usize, values: &[f64], out: &mut [f64]) {
        let mut buf = row.to_vec();
        for (v, o) in values.iter().zip(out.iter_mut()) {
            buf[coord] = *v;
            *o = self.predict(&buf);
        }
    }
}

pub type FittedRegressor = Arc<dyn Regressor>;

/// Wraps a closure as a [`Regressor`]; used for oracle nuisances.
pub struct FnRegressor<F>(pub F);

impl<F> Regressor for FnRegressor<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn predict(&self, row: &[f64]) -> f64 {
        (self.0)(row)
    }
}

pub fn from_fn<F>(f: F) -> FittedRegressor
where
    F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
{
    Arc::new(FnRegressor(f))
}

pub fn constant(c: f64) -> FittedRegressor {
    from_fn(move |_| c)
}

/// Affine predictor `intercept + coef . row`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub intercept: f64,
    pub coef: Vec<f64>,
}

impl Regressor for LinearPredictor {
    fn predict(&self, row: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(row).map(|(b, v)| b * v).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "learner", rename_all = "lowercase")]
pub enum RegressorSpec {
    Gbt(GbtParams),
    Ols,
}

impl Default for RegressorSpec {
    fn default() -> Self {
        RegressorSpec::Gbt(GbtParams::default())
    }
}

impl RegressorSpec {
    /// Fits on `features` (no intercept column; OLS adds one) with a seed
    /// that overrides any seed stored in the spec.
    pub fn fit(&self, features: &DMatrix<f64>, targets: &[f64], seed: u64) -> Result<FittedRegressor> {
        match self {
            RegressorSpec::Gbt(params) => {
                let params = GbtParams { seed, ..params.clone() };
                Ok(Arc::new(fit_gbt(&params, features, targets)?))
            }
            RegressorSpec::Ols => {
                let n = features.nrows();
                let design = DMatrix::from_fn(n, features.ncols() + 1, |i, j| {
                    if j == 0 {
                        1.0
                    } else {
                        features[(i, j - 1)]
                    }
                });
                let fit = fit_ols(&design, targets)?;
                Ok(Arc::new(LinearPredictor {
                    intercept: fit.coef[0],
                    coef: fit.coef[1..].to_vec(),
                }))
            }
        }
    }
}

/// Predictions of `model` on every row of `features`.
pub fn predict_rows(model: &dyn Regressor, features: &DMatrix<f64>) -> Vec<f64> {
    let mut row = vec![0.0; features.ncols()];
    (0..features.nrows())
        .map(|i| {
            for (j, r) in row.iter_mut().enumerate() {
                *r = features[(i, j)];
            }
            model.predict(&row)
        })
        .collect()
}
