//! Ordinary least squares with heteroskedasticity-robust (HC0) covariance.

use nalgebra::{DMatrix, DVector};

use super::Regressor;
use crate::error::{Error, Result};

const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub coef: Vec<f64>,
    /// Sandwich covariance `(X'X)^-1 X' diag(e^2) X (X'X)^-1`.
    pub cov: DMatrix<f64>,
    pub residuals: Vec<f64>,
}

impl OlsFit {
    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.coef.len()).map(|j| self.cov[(j, j)].sqrt()).collect()
    }
}

impl Regressor for OlsFit {
    /// `row` must include the intercept column if the design had one.
    fn predict(&self, row: &[f64]) -> f64 {
        self.coef.iter().zip(row).map(|(b, v)| b * v).sum()
    }
}

/// Least squares of `targets` on the columns of `design` (which should
/// carry its own intercept column).
pub fn fit_ols(design: &DMatrix<f64>, targets: &[f64]) -> Result<OlsFit> {
    let (n, k) = design.shape();
    if targets.len() != n {
        return Err(Error::Config(format!("{} targets for {n} rows", targets.len())));
    }
    if n < k {
        return Err(Error::SingularDesign(format!("{n} rows for {k} columns")));
    }
    let qr = design.clone().qr();
    let r = qr.r();
    let scale = (0..k).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if let Some(j) = (0..k).find(|&j| r[(j, j)].abs() <= RANK_TOL * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::SingularDesign(format!("column {j} is linearly dependent on earlier columns")));
    }
    let y = DVector::from_column_slice(targets);
    let qty = qr.q().transpose() * &y;
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::SingularDesign("triangular solve failed".into()))?;
    let fitted = design * &coef;
    let residuals: Vec<f64> = (0..n).map(|i| targets[i] - fitted[i]).collect();

    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::SingularDesign("triangular inverse failed".into()))?;
    let bread = &r_inv * r_inv.transpose();
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let e2 = residuals[i] * residuals[i];
        let row = design.row(i);
        for a in 0..k {
            let ra = row[a] * e2;
            for b in 0..k {
                meat[(a, b)] += ra * row[b];
            }
        }
    }
    let cov = &bread * meat * &bread;
    Ok(OlsFit {
        coef: coef.iter().copied().collect(),
        cov,
        residuals,
    })
}
