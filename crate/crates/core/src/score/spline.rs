//! Penalised natural-cubic-spline score estimation for a univariate sample.
//!
//! Minimises `(1/n) sum [rho(e_i)^2 + 2 rho'(e_i)] + lambda int rho''^2`
//! over natural cubic splines with knots at sample quantiles. The first term
//! is, up to a constant, the expected squared distance to the true score
//! (integration by parts), so no density estimate is needed. As
//! `lambda -> inf` the fit collapses to the best linear score, which is the
//! Gaussian one.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{mean, population_sd};

const MAX_KNOTS: usize = 30;
const BISECTION_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineScoreModel {
    /// Residuals are mapped to `u = (e - center) / scale` before evaluation.
    pub center: f64,
    pub scale: f64,
    /// Knots on the `u` scale; empty for the linear fit.
    pub knots: Vec<f64>,
    pub coef: Vec<f64>,
    pub lambda: f64,
    pub df: f64,
}

/// Values, first and second derivatives of the natural spline basis at `u`.
/// Columns: `1, u, d_1 - d_{K-1}, ..., d_{K-2} - d_{K-1}`.
fn basis_at(knots: &[f64], u: f64, value: &mut [f64], first: &mut [f64], second: &mut [f64]) {
    value[0] = 1.0;
    first[0] = 0.0;
    second[0] = 0.0;
    value[1] = u;
    first[1] = 1.0;
    second[1] = 0.0;
    let k = knots.len();
    if k < 3 {
        return;
    }
    let last = knots[k - 1];
    let d = |j: usize| -> (f64, f64, f64) {
        let span = last - knots[j];
        let a = (u - knots[j]).max(0.0);
        let b = (u - last).max(0.0);
        (
            (a * a * a - b * b * b) / span,
            3.0 * (a * a - b * b) / span,
            6.0 * (a - b) / span,
        )
    };
    let (v_ref, f_ref, s_ref) = d(k - 2);
    for j in 0..k - 2 {
        let (v, f, s) = d(j);
        value[j + 2] = v - v_ref;
        first[j + 2] = f - f_ref;
        second[j + 2] = s - s_ref;
    }
}

fn n_basis(knots: &[f64]) -> usize {
    if knots.len() < 3 {
        2
    } else {
        knots.len()
    }
}

/// Empirical Gram `G = mean b b'` and `c = mean b'` on the `u` scale.
fn moments(knots: &[f64], u: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let m = n_basis(knots);
    let mut g = DMatrix::zeros(m, m);
    let mut c = DVector::zeros(m);
    let (mut v, mut f, mut s) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for &ui in u {
        basis_at(knots, ui, &mut v, &mut f, &mut s);
        for a in 0..m {
            c[a] += f[a];
            for b in a..m {
                g[(a, b)] += v[a] * v[b];
            }
        }
    }
    let n = u.len() as f64;
    for a in 0..m {
        c[a] /= n;
        for b in a..m {
            g[(a, b)] /= n;
            g[(b, a)] = g[(a, b)];
        }
    }
    (g, c)
}

/// Roughness Gram `int b'' b''^T`. Second derivatives are linear between
/// knots and zero outside, so Simpson's rule per knot interval is exact.
fn roughness(knots: &[f64]) -> DMatrix<f64> {
    let m = n_basis(knots);
    let mut omega = DMatrix::zeros(m, m);
    if knots.len() < 3 {
        return omega;
    }
    let (mut v, mut f) = (vec![0.0; m], vec![0.0; m]);
    let mut s = [vec![0.0; m], vec![0.0; m], vec![0.0; m]];
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        for (slot, u) in [a, 0.5 * (a + b), b].into_iter().enumerate() {
            basis_at(knots, u, &mut v, &mut f, &mut s[slot]);
        }
        let len = b - a;
        for i in 0..m {
            for j in i..m {
                let val = len / 6.0 * (s[0][i] * s[0][j] + 4.0 * s[1][i] * s[1][j] + s[2][i] * s[2][j]);
                omega[(i, j)] += val;
            }
        }
    }
    for i in 0..m {
        for j in 0..i {
            omega[(i, j)] = omega[(j, i)];
        }
    }
    omega
}

fn solve(g: &DMatrix<f64>, omega: &DMatrix<f64>, c: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let a = g + omega * lambda;
    a.clone()
        .cholesky()
        .map(|ch| -ch.solve(c))
        .or_else(|| a.lu().solve(c).map(|b| -b))
        .ok_or_else(|| Error::Conditioning(format!("penalised spline system singular at lambda {lambda:e}; increase lambda")))
}

fn effective_df(g: &DMatrix<f64>, omega: &DMatrix<f64>, lambda: f64) -> Option<f64> {
    let a = g + omega * lambda;
    let sol = a.lu().solve(g)?;
    Some(sol.trace())
}

/// Quantile knots, `min(3 df, 30)` of them, at probabilities `i / (K + 1)`.
fn quantile_knots(sorted: &[f64], count: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut knots: Vec<f64> = (1..=count)
        .map(|i| {
            let p = i as f64 / (count + 1) as f64;
            let pos = p * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            if lo + 1 < n {
                sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
            } else {
                sorted[n - 1]
            }
        })
        .collect();
    knots.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    knots
}

/// Fits the penalised spline score with `df` effective degrees of freedom.
/// `df = 2` gives the exact linear (Gaussian) score.
pub fn fit_spline_score(residuals: &[f64], df: f64) -> Result<SplineScoreModel> {
    let n = residuals.len();
    if !(df >= 2.0) {
        return Err(Error::Config(format!("spline df {df} below 2")));
    }
    if (n as f64) < df || n < 3 {
        return Err(Error::InsufficientData(format!("{n} residuals for {df} degrees of freedom")));
    }
    let center = mean(residuals);
    let scale = population_sd(residuals);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::DegenerateColumn("residuals".into()));
    }
    let u: Vec<f64> = residuals.iter().map(|e| (e - center) / scale).collect();

    let linear = |lambda: f64| -> Result<SplineScoreModel> {
        let (g, c) = moments(&[], &u);
        let coef = solve(&g, &DMatrix::zeros(2, 2), &c, 0.0)?;
        Ok(SplineScoreModel {
            center,
            scale,
            knots: Vec::new(),
            coef: coef.iter().copied().collect(),
            lambda,
            df: 2.0,
        })
    };
    if df <= 2.0 + 1e-9 {
        return linear(f64::INFINITY);
    }

    let mut sorted = u.clone();
    sorted.sort_by(f64::total_cmp);
    let count = ((3.0 * df).round() as usize).clamp(3, MAX_KNOTS);
    let knots = quantile_knots(&sorted, count);
    if knots.len() < 3 {
        return linear(f64::INFINITY);
    }
    let (g, c) = moments(&knots, &u);
    let omega = roughness(&knots);
    let m = knots.len() as f64;
    let target = df.min(m);

    // bisection on log lambda; the trace falls from m towards 2
    let base = g.trace() / omega.trace().max(f64::MIN_POSITIVE);
    let (mut lo, mut hi) = ((base * 1e-12).ln(), (base * 1e12).ln());
    let trace_at = |log_l: f64| effective_df(&g, &omega, log_l.exp()).unwrap_or(f64::NAN);
    if trace_at(lo).is_nan() {
        return Err(Error::Conditioning("spline Gram matrix singular; use fewer degrees of freedom".into()));
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let t = trace_at(mid);
        if t.is_nan() || t > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 {
            break;
        }
    }
    let lambda = (0.5 * (lo + hi)).exp();
    let coef = solve(&g, &omega, &c, lambda)?;
    Ok(SplineScoreModel {
        center,
        scale,
        knots,
        coef: coef.iter().copied().collect(),
        lambda,
        df: effective_df(&g, &omega, lambda).unwrap_or(target),
    })
}

impl SplineScoreModel {
    fn eval_u(&self, u: f64) -> (f64, f64) {
        let m = self.coef.len();
        let (mut v, mut f, mut s) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        basis_at(&self.knots, u, &mut v, &mut f, &mut s);
        let val = v.iter().zip(&self.coef).map(|(a, b)| a * b).sum();
        let der = f.iter().zip(&self.coef).map(|(a, b)| a * b).sum();
        (val, der)
    }

    pub fn score(&self, e: f64) -> f64 {
        self.eval_u((e - self.center) / self.scale).0 / self.scale
    }

    pub fn derivative(&self, e: f64) -> f64 {
        self.eval_u((e - self.center) / self.scale).1 / (self.scale * self.scale)
    }

    /// `(intercept, slope)` on the original scale for the linear fit.
    pub fn linear_coefficients(&self) -> Option<(f64, f64)> {
        if !self.knots.is_empty() {
            return None;
        }
        let s2 = self.scale * self.scale;
        let slope = self.coef[1] / s2;
        Some((self.coef[0] / self.scale - slope * self.center, slope))
    }

    /// Penalised objective of the coefficient vector `coef` on `residuals`,
    /// on the internal standardized scale.
    pub fn objective(&self, residuals: &[f64], coef: &[f64]) -> f64 {
        let u: Vec<f64> = residuals.iter().map(|e| (e - self.center) / self.scale).collect();
        let (g, c) = moments(&self.knots, &u);
        let omega = roughness(&self.knots);
        let b = DVector::from_column_slice(coef);
        let penalty = if self.lambda.is_finite() {
            self.lambda * b.dot(&(&omega * &b))
        } else {
            0.0
        };
        b.dot(&(&g * &b)) + 2.0 * b.dot(&c) + penalty
    }

    /// Norm of `(G + lambda Omega) beta + c` on `residuals`; zero at the fit.
    pub fn system_residual(&self, residuals: &[f64]) -> f64 {
        let u: Vec<f64> = residuals.iter().map(|e| (e - self.center) / self.scale).collect();
        let (g, c) = moments(&self.knots, &u);
        let lambda = if self.lambda.is_finite() { self.lambda } else { 0.0 };
        let a = g + roughness(&self.knots) * lambda;
        (a * DVector::from_column_slice(&self.coef) + c).norm()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::NoiseFamily;

    #[test]
    fn linear_limit_matches_closed_form() {
        let e = NoiseFamily::Logistic.sample(500, 4);
        let e: Vec<f64> = e.iter().map(|v| 0.3 + 1.7 * v).collect();
        let fit = fit_spline_score(&e, 2.0).unwrap();
        let (ebar, s2) = (mean(&e), population_sd(&e).powi(2));
        for x in [-3.0, -0.5, 0.0, 0.8, 4.0] {
            let want = -(x - ebar) / s2;
            assert!((fit.score(x) - want).abs() < 1e-10, "{x}");
            assert!((fit.derivative(x) + 1.0 / s2).abs() < 1e-10);
        }
    }

    #[test]
    fn gaussian_residuals_recover_the_linear_score() {
        let train = NoiseFamily::Normal.sample(2000, 1);
        let test = NoiseFamily::Normal.sample(5000, 2);
        let fit = fit_spline_score(&train, 5.0).unwrap();
        let mse = test.iter().map(|e| (fit.score(*e) + e).powi(2)).sum::<f64>() / test.len() as f64;
        assert!(mse < 0.05, "{mse}");
        let identity = train
            .iter()
            .map(|e| fit.score(*e).powi(2) + fit.derivative(*e))
            .sum::<f64>()
            / train.len() as f64;
        assert!(identity.abs() < 0.1, "{identity}");
    }

    #[test]
    fn symmetric_residuals_give_a_near_odd_fit() {
        let half = NoiseFamily::Normal.sample(1000, 5);
        let e: Vec<f64> = half.iter().copied().chain(half.iter().map(|v| -v)).collect();
        let fit = fit_spline_score(&e, 5.0).unwrap();
        assert!(fit.score(0.0).abs() < 0.05, "{}", fit.score(0.0));
        assert!((fit.score(1.0) + fit.score(-1.0)).abs() < 1e-6);
    }

    #[test]
    fn bimodal_residuals_are_tracked() {
        let train = NoiseFamily::Mix3.sample(4000, 7);
        let test = NoiseFamily::Mix3.sample(5000, 8);
        let fit = fit_spline_score(&train, 8.0).unwrap();
        let mse = test
            .iter()
            .map(|e| (fit.score(*e) - NoiseFamily::Mix3.score(*e)).powi(2))
            .sum::<f64>()
            / test.len() as f64;
        let linear = fit_spline_score(&train, 2.0).unwrap();
        let mse_lin = test
            .iter()
            .map(|e| (linear.score(*e) - NoiseFamily::Mix3.score(*e)).powi(2))
            .sum::<f64>()
            / test.len() as f64;
        assert!(mse < 0.5 * mse_lin, "{mse} vs {mse_lin}");
    }

    #[test]
    fn solves_its_linear_system_and_is_stationary() {
        let e = NoiseFamily::T4.sample(1500, 3);
        let fit = fit_spline_score(&e, 6.0).unwrap();
        assert!(fit.system_residual(&e) < 1e-8);
        assert!((fit.df - 6.0).abs() < 1e-6, "{}", fit.df);
        let base = fit.objective(&e, &fit.coef);
        for j in 0..fit.coef.len() {
            for d in [-1e-4, 1e-4] {
                let mut b = fit.coef.clone();
                b[j] += d;
                assert!(fit.objective(&e, &b) >= base);
            }
        }
    }

    #[test]
    fn tails_are_linear() {
        let e = NoiseFamily::Mix2.sample(1000, 9);
        let fit = fit_spline_score(&e, 5.0).unwrap();
        let far = 50.0;
        let slope_a = (fit.score(far + 1.0) - fit.score(far)) / 1.0;
        let slope_b = (fit.score(far + 11.0) - fit.score(far + 10.0)) / 1.0;
        assert!((slope_a - slope_b).abs() < 1e-9);
        assert!((fit.derivative(-far) - fit.derivative(-far - 20.0)).abs() < 1e-12);
    }

    #[test]
    fn roughness_of_a_single_cubic_piece() {
        // one nonlinear column; compare with a dense midpoint sum
        let knots = [0.0, 1.0, 2.0];
        let omega = roughness(&knots);
        let m = 3;
        let steps = 200_000;
        let (mut v, mut f, mut s) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        let mut acc = 0.0;
        for i in 0..steps {
            let u = 2.0 * (i as f64 + 0.5) / steps as f64;
            basis_at(&knots, u, &mut v, &mut f, &mut s);
            acc += s[2] * s[2] * 2.0 / steps as f64;
        }
        assert!((omega[(2, 2)] - acc).abs() < 1e-6, "{} vs {acc}", omega[(2, 2)]);
        assert_eq!(omega[(0, 0)], 0.0);
        assert_eq!(omega[(1, 1)], 0.0);
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(fit_spline_score(&[1.0; 50], 4.0).is_err());
        assert!(fit_spline_score(&[0.1, 0.2], 4.0).is_err());
        assert!(fit_spline_score(&[0.1, 0.2, 0.4], 1.0).is_err());
    }
}
