//! Run configuration shared by the estimators, the simulator and the CLI.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regression::{GbtParams, RegressorSpec, TreeParams};

/// Candidate bandwidths `exp(k) / (2 sqrt 3) * sd(x)` for `k` on an
/// arithmetic grid, plus the tolerance of the selection rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandwidthConfig {
    pub log_min: f64,
    pub log_max: f64,
    pub log_step: f64,
    pub tol: f64,
}

impl Default for BandwidthConfig {
    fn default() -> Self {
        Self {
            log_min: -5.0,
            log_max: 2.0,
            log_step: 0.2,
            tol: 2.0,
        }
    }
}

impl BandwidthConfig {
    /// Bandwidth candidates for an exposure with standard deviation `sd_x`.
    pub fn candidates(&self, sd_x: f64) -> Vec<f64> {
        let steps = ((self.log_max - self.log_min) / self.log_step + 1e-9).floor() as usize;
        (0..=steps)
            .map(|i| (self.log_min + i as f64 * self.log_step).exp() / (2.0 * 3f64.sqrt()) * sd_x)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureConfig {
    pub points: usize,
    pub span: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { points: 101, span: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub folds: usize,
    pub seed: u64,
    pub alpha: f64,
    /// Learner for `E[Y | X, Z]`.
    pub outcome: RegressorSpec,
    /// Learner for `E[X | Z]` in the location-scale score and in PLR.
    pub exposure: RegressorSpec,
    /// Learner for `E[Y | Z]` in PLR.
    pub response_on_controls: RegressorSpec,
    pub scale_tree: TreeParams,
    /// Scale floor as a fraction of `sd(x)`.
    pub scale_floor: f64,
    pub spline_df: f64,
    pub bandwidth: BandwidthConfig,
    pub quadrature: QuadratureConfig,
    /// Lasso penalty for the basis score; chosen by cross-validation on the
    /// training folds when absent.
    pub basis_lambda: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            alpha: 0.05,
            outcome: RegressorSpec::Gbt(GbtParams {
                rounds: 200,
                learning_rate: 0.05,
                max_depth: 3,
                min_leaf: 10,
                ..GbtParams::default()
            }),
            exposure: RegressorSpec::Gbt(GbtParams {
                rounds: 100,
                learning_rate: 0.05,
                max_depth: 1,
                min_leaf: 50,
                ..GbtParams::default()
            }),
            response_on_controls: RegressorSpec::Gbt(GbtParams {
                rounds: 100,
                learning_rate: 0.05,
                max_depth: 3,
                min_leaf: 10,
                ..GbtParams::default()
            }),
            scale_tree: TreeParams::default(),
            scale_floor: 0.01,
            spline_df: 5.0,
            bandwidth: BandwidthConfig::default(),
            quadrature: QuadratureConfig::default(),
            basis_lambda: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        let j = self.quadrature.points;
        if j < 3 || j.is_multiple_of(2) {
            return Err(Error::Config(format!("quadrature size must be odd and at least 3, got {j}")));
        }
        if !(self.quadrature.span > 0.0) {
            return Err(Error::Config("quadrature span must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.spline_df >= 2.0) {
            return Err(Error::Config(format!("spline df {} below 2", self.spline_df)));
        }
        if !(self.scale_floor > 0.0) {
            return Err(Error::Config("scale floor must be positive".into()));
        }
        let b = &self.bandwidth;
        if !(b.log_step > 0.0) || b.log_max < b.log_min {
            return Err(Error::Config("empty bandwidth grid".into()));
        }
        if !(b.tol >= 0.0) {
            return Err(Error::Config("bandwidth tolerance must be non-negative".into()));
        }
        if let Some(l) = self.basis_lambda {
            if !(l >= 0.0) {
                return Err(Error::Config("basis lambda must be non-negative".into()));
            }
        }
        for spec in [&self.outcome, &self.exposure, &self.response_on_controls] {
            if let RegressorSpec::Gbt(p) = spec {
                p.validate()?;
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
