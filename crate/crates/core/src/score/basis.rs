//! Quadratic-basis score comparator: lasso regression of `x` on a
//! quadratic basis in `(x, z)` that omits the linear `x` term, giving
//! `rho(x, z) = -(x - b(x, z)' beta) / s2`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::regression::{fit_lasso, L1Model, Regressor};

/// Basis row without the constant (the lasso intercept plays that role):
/// `x^2, x z_1..x z_p, then for each a: z_a, z_a^2, z_a z_{a+1}..z_a z_p`.
pub fn quadratic_basis(x: f64, z: &[f64]) -> Vec<f64> {
    let p = z.len();
    let mut out = Vec::with_capacity(basis_len(p));
    out.push(x * x);
    out.extend(z.iter().map(|v| x * v));
    for a in 0..p {
        out.push(z[a]);
        for b in a..p {
            out.push(z[a] * z[b]);
        }
    }
    out
}

/// Basis length excluding the constant.
pub fn basis_len(p: usize) -> usize {
    1 + p + p + p * (p + 1) / 2
}

pub fn basis_matrix(x: &[f64], z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.len();
    let p = z.ncols();
    let mut out = DMatrix::zeros(n, basis_len(p));
    let mut zrow = vec![0.0; p];
    for i in 0..n {
        for (j, v) in zrow.iter_mut().enumerate() {
            *v = z[(i, j)];
        }
        for (j, v) in quadratic_basis(x[i], &zrow).into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisScoreModel {
    pub fit: L1Model,
    pub sigma2: f64,
}

impl BasisScoreModel {
    pub fn eval(&self, x: f64, z: &[f64]) -> f64 {
        -(x - self.fit.predict(&quadratic_basis(x, z))) / self.sigma2
    }
}

/// Lasso of `x` on the quadratic basis at penalty `lambda`. The variance is
/// the in-sample mean of `x (x - b' beta)`.
pub fn fit_basis_score(x: &[f64], z: &DMatrix<f64>, lambda: f64) -> Result<BasisScoreModel> {
    let design = basis_matrix(x, z);
    let fit = fit_lasso(&design, x, lambda);
    let n = x.len() as f64;
    let sigma2 = (0..x.len())
        .map(|i| {
            let row: Vec<f64> = design.row(i).iter().copied().collect();
            x[i] * (x[i] - fit.predict(&row))
        })
        .sum::<f64>()
        / n;
    if !(sigma2 > 0.0) {
        return Err(Error::DegenerateVariance(sigma2));
    }
    Ok(BasisScoreModel { fit, sigma2 })
}
