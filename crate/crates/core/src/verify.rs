//! Numerical checks of the identities and bounds the estimator relies on:
//! integration by parts for scores, moment and moment-generating bounds for
//! Lipschitz scores, the density-ratio sandwich, linear scores of Gaussian
//! linear models, and the moments of the quadrature grid.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::QuadratureConfig;
use crate::distributions::{NoiseFamily, ALL_FAMILIES};
use crate::error::{Error, Result};
use crate::numeric::{double_factorial, integrate_real_line};
use crate::regression::{fit_lasso, fit_ols};
use crate::resmooth::QuadratureGrid;

/// Absolute tolerance handed to the adaptive quadrature.
pub const QUADRATURE_TOL: f64 = 1e-10;
const LIPSCHITZ_GRID_POINTS: usize = 400_001;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Named computed quantities.
    pub computed: Vec<(String, f64)>,
    /// What the quantities are compared against, in words.
    pub bound: String,
    pub tolerance: f64,
    pub pass: bool,
    /// Reported only; outside the hypotheses of the claim being checked.
    pub informational: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, bound: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            computed: Vec::new(),
            bound: bound.into(),
            tolerance,
            pass: true,
            informational: false,
        }
    }

    fn record(&mut self, label: impl Into<String>, value: f64, ok: bool) {
        self.computed.push((label.into(), value));
        self.pass &= ok;
    }

    /// Whether this result should fail a suite.
    pub fn failed(&self) -> bool {
        !self.pass && !self.informational
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match (self.pass, self.informational) {
            (_, true) => "INFO",
            (true, false) => "PASS",
            (false, false) => "FAIL",
        };
        let worst = self
            .computed
            .iter()
            .map(|(k, v)| format!("{k}={v:.3e}"))
            .take(4)
            .collect::<Vec<_>>()
            .join(" ");
        write!(f, "{status:<4}  {:<36} {}  [{}; tol {:e}]", self.name, worst, self.bound, self.tolerance)
    }
}

/// Test functions with analytic derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestFunction {
    Identity,
    Square,
    Sine,
    /// `exp(-x^2) x^3`.
    DampedCube,
}

pub const TEST_FUNCTIONS: [TestFunction; 4] = [
    TestFunction::Identity,
    TestFunction::Square,
    TestFunction::Sine,
    TestFunction::DampedCube,
];

impl TestFunction {
    pub fn name(self) -> &'static str {
        match self {
            TestFunction::Identity => "x",
            TestFunction::Square => "x^2",
            TestFunction::Sine => "sin x",
            TestFunction::DampedCube => "exp(-x^2) x^3",
        }
    }

    pub fn value(self, x: f64) -> f64 {
        match self {
            TestFunction::Identity => x,
            TestFunction::Square => x * x,
            TestFunction::Sine => x.sin(),
            TestFunction::DampedCube => (-x * x).exp() * x.powi(3),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            TestFunction::Identity => 1.0,
            TestFunction::Square => 2.0 * x,
            TestFunction::Sine => x.cos(),
            TestFunction::DampedCube => (-x * x).exp() * (3.0 * x * x - 2.0 * x.powi(4)),
        }
    }
}

/// `E[g'(X) + rho(X) g(X)]`, which vanishes for every admissible `g`.
pub fn check_integration_by_parts(fam: NoiseFamily, g: TestFunction) -> Result<CheckResult> {
    let value = integrate_real_line(
        |x| (g.derivative(x) + fam.score(x) * g.value(x)) * fam.density(x),
        QUADRATURE_TOL,
    )?;
    let mut c = CheckResult::new(format!("ibp {fam} g={}", g.name()), "|E[g' + rho g]| < 1e-6", 1e-6);
    c.record("value", value, value.abs() < 1e-6);
    Ok(c)
}

/// `E[rho^{2k}] <= C^k (2k-1)!!` for `k = 1..k_max`, the moment-generating
/// bound with parameter `sqrt(2C)`, and `E[rho^2] = -E[rho']`.
pub fn check_score_moments(fam: NoiseFamily, k_max: u32) -> Result<CheckResult> {
    let lip = fam.lipschitz_constant();
    let mut c = CheckResult::new(
        format!("moments {fam}"),
        "E[rho^2k] <= C^k (2k-1)!!, E[exp(l rho)] <= exp(l^2 C), E[rho^2] = -E[rho']",
        1e-8,
    );
    c.computed.push(("C".into(), lip));
    for k in 1..=k_max {
        let m = integrate_real_line(|x| fam.score(x).powi(2 * k as i32) * fam.density(x), QUADRATURE_TOL)?;
        let bound = lip.powi(k as i32) * double_factorial(2 * k as u64 - 1);
        c.record(format!("E[rho^{}]", 2 * k), m, m <= bound * (1.0 + 1e-8));
    }
    for lambda in [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0] {
        let mgf = integrate_real_line(|x| (lambda * fam.score(x)).exp() * fam.density(x), QUADRATURE_TOL)?;
        let bound = (lambda * lambda * 2.0 * lip / 2.0).exp();
        c.record(format!("mgf({lambda})"), mgf, mgf <= bound * (1.0 + 1e-8));
    }
    let fisher = integrate_real_line(|x| fam.score(x).powi(2) * fam.density(x), QUADRATURE_TOL)?;
    let neg_slope = -integrate_real_line(|x| fam.score_derivative(x) * fam.density(x), QUADRATURE_TOL)?;
    c.record("fisher_gap", fisher - neg_slope, (fisher - neg_slope).abs() < 1e-8);
    Ok(c)
}

/// The Lipschitz constant used by the density-ratio check: closed form when
/// available, otherwise a fine-grid maximum with 1% headroom.
pub fn ratio_constant(fam: NoiseFamily) -> f64 {
    match fam {
        NoiseFamily::Normal | NoiseFamily::Logistic => fam.lipschitz_constant(),
        _ => 1.01 * fam.lipschitz_on_grid(LIPSCHITZ_GRID_POINTS),
    }
}

/// `exp(u rho(x) - u^2 C/2) <= p(x+u)/p(x) <= exp(u rho(x) + u^2 C/2)` on a
/// grid of `x` and `u`.
pub fn check_density_ratio(fam: NoiseFamily, xs: &[f64], us: &[f64]) -> CheckResult {
    let lip = ratio_constant(fam);
    let tol = 1e-10;
    let mut c = CheckResult::new(format!("ratio {fam}"), "exp(u rho -+ u^2 C/2) sandwich p(x+u)/p(x)", tol);
    c.computed.push(("C".into(), lip));
    let mut worst_low = f64::INFINITY;
    let mut worst_high = f64::INFINITY;
    for &x in xs {
        let rho = fam.score(x);
        for &u in us {
            let ratio = (fam.log_density(x + u) - fam.log_density(x)).exp();
            let lower = (u * rho - 0.5 * u * u * lip).exp();
            let upper = (u * rho + 0.5 * u * u * lip).exp();
            worst_low = worst_low.min(ratio * (1.0 + tol) - lower);
            worst_high = worst_high.min(upper * (1.0 + tol) - ratio);
        }
    }
    c.record("min(ratio - lower)", worst_low, worst_low >= 0.0);
    c.record("min(upper - ratio)", worst_high, worst_high >= 0.0);
    c
}

/// `x` grid on [-5, 5] and `u` grid on [-2, 2] used by the suite.
pub fn ratio_grids() -> (Vec<f64>, Vec<f64>) {
    let xs = (0..=200).map(|i| -5.0 + 0.05 * i as f64).collect();
    let us = (0..=80).map(|i| -2.0 + 0.05 * i as f64).collect();
    (xs, us)
}

/// Least-squares linear score for `X = gamma' Z + sqrt(S) eps` with standard
/// normal `Z`: the fitted slope should be `-1/S` and the control
/// coefficients `gamma/S`, each within three Monte Carlo standard errors.
/// With non-Gaussian `eps` the result is informational.
pub fn check_linear_score_gaussian(
    n: usize,
    seed: u64,
    gamma: &[f64],
    s: f64,
    noise: NoiseFamily,
) -> Result<CheckResult> {
    let p = gamma.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x: Vec<f64> = (0..n)
        .map(|i| (0..p).map(|j| gamma[j] * z[(i, j)]).sum::<f64>() + s.sqrt() * noise.draw(&mut rng))
        .collect();
    let design = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { z[(i, j - 1)] });
    let ols = fit_ols(&design, &x)?;
    let fitted: Vec<f64> = (0..n)
        .map(|i| ols.coef[0] + (0..p).map(|j| ols.coef[j + 1] * z[(i, j)]).sum::<f64>())
        .collect();
    let s_hat = (0..n).map(|i| x[i] * (x[i] - fitted[i])).sum::<f64>() / n as f64;
    let se = ols.std_errors();

    let mut c = CheckResult::new(
        format!("linear score gamma={gamma:?} S={s} {noise}"),
        "slope -1/S and coefficients gamma/S within 3 MC se",
        3.0,
    );
    c.informational = noise != NoiseFamily::Normal;
    // delta method with Var(S_hat) ~ 2 S^2 / n
    let var_s = 2.0 * s * s / n as f64;
    let slope = -1.0 / s_hat;
    let slope_se = (var_s / s.powi(4)).sqrt();
    c.record("slope", slope, (slope + 1.0 / s).abs() <= 3.0 * slope_se);
    for j in 0..p {
        let coef = ols.coef[j + 1] / s_hat;
        let coef_se = (se[j + 1].powi(2) / (s * s) + gamma[j].powi(2) * var_s / s.powi(4)).sqrt();
        c.record(format!("coef{}", j + 1), coef, (coef - gamma[j] / s).abs() <= 3.0 * coef_se);
    }
    // the unpenalized coordinate-descent fit takes the same route
    if p > 0 {
        let lasso = fit_lasso(&z, &x, 0.0);
        let gap = (0..p).map(|j| (lasso.coef[j] - ols.coef[j + 1]).abs()).fold(0.0, f64::max);
        c.record("lasso_gap", gap, gap < 1e-6);
    }
    Ok(c)
}

/// Moments of the default quadrature grid.
pub fn check_grid(cfg: &QuadratureConfig) -> Result<CheckResult> {
    let grid = QuadratureGrid::new(cfg.points, cfg.span)?;
    let mut c = CheckResult::new(
        format!("grid J={} span={}", cfg.points, cfg.span),
        "sum q = 1, sum q w = 0, sum q w^2 in (0.995, 1), sum q w^3 = 0",
        1e-14,
    );
    let m0 = grid.moment(0);
    let m1 = grid.moment(1);
    let m2 = grid.moment(2);
    let m3 = grid.moment(3);
    c.record("sum q", m0, (m0 - 1.0).abs() <= 1e-14);
    c.record("sum q w", m1, m1 == 0.0);
    c.record("sum q w^2", m2, m2 > 0.995 && m2 < 1.0);
    c.record("sum q w^3", m3, m3 == 0.0);
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    Prop1,
    Thm3,
    Lem1,
    ThmB1,
    Grid,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "prop1" => Ok(Suite::Prop1),
            "thm3" => Ok(Suite::Thm3),
            "lem1" => Ok(Suite::Lem1),
            "thmB1" | "thmb1" => Ok(Suite::ThmB1),
            "grid" => Ok(Suite::Grid),
            other => Err(Error::Config(format!("unknown suite `{other}`"))),
        }
    }
}

/// Runs the checks of `suite`; quadrature failures are reported as failed
/// checks rather than aborting the suite.
pub fn run_suite(suite: Suite) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut push = |name: String, r: Result<CheckResult>| {
        out.push(r.unwrap_or_else(|e| {
            let mut c = CheckResult::new(name, format!("error: {e}"), 0.0);
            c.pass = false;
            c
        }))
    };
    let want = |s: Suite| suite == Suite::All || suite == s;
    if want(Suite::Prop1) {
        for fam in ALL_FAMILIES {
            for g in TEST_FUNCTIONS {
                push(format!("ibp {fam} g={}", g.name()), check_integration_by_parts(fam, g));
            }
        }
    }
    if want(Suite::Thm3) {
        for fam in ALL_FAMILIES {
            push(format!("moments {fam}"), check_score_moments(fam, 4));
        }
    }
    if want(Suite::Lem1) {
        let (xs, us) = ratio_grids();
        for fam in ALL_FAMILIES {
            push(format!("ratio {fam}"), Ok(check_density_ratio(fam, &xs, &us)));
        }
    }
    if want(Suite::ThmB1) {
        push("linear score null".into(), check_linear_score_gaussian(100_000, 1, &[0.0], 1.0, NoiseFamily::Normal));
        push("linear score".into(), check_linear_score_gaussian(100_000, 2, &[1.0, 0.5], 2.0, NoiseFamily::Normal));
        push("linear score t4".into(), check_linear_score_gaussian(100_000, 3, &[1.0, 0.5], 2.0, NoiseFamily::T4));
    }
    if want(Suite::Grid) {
        push("grid".into(), check_grid(&QuadratureConfig::default()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_identities_are_tight() {
        let c = check_score_moments(NoiseFamily::Normal, 2).unwrap();
        assert!(c.pass, "{c}");
        let get = |k: &str| c.computed.iter().find(|(n, _)| n == k).unwrap().1;
        assert!((get("E[rho^2]") - 1.0).abs() < 1e-9);
        assert!((get("E[rho^4]") - 3.0).abs() < 1e-9);
        let ibp = check_integration_by_parts(NoiseFamily::Normal, TestFunction::Square).unwrap();
        assert!(ibp.computed[0].1.abs() < 1e-10);
    }

    #[test]
    fn every_family_passes_integration_by_parts() {
        for fam in ALL_FAMILIES {
            for g in TEST_FUNCTIONS {
                let c = check_integration_by_parts(fam, g).unwrap();
                assert!(c.pass, "{c}");
            }
        }
    }

    #[test]
    fn moment_bounds_for_all_families() {
        for fam in ALL_FAMILIES {
            let c = check_score_moments(fam, 4).unwrap();
            assert!(c.pass, "{c}");
        }
    }

    #[test]
    fn t4_bounds_have_slack() {
        let c = check_score_moments(NoiseFamily::T4, 4).unwrap();
        let lip = NoiseFamily::T4.lipschitz_constant();
        let m2 = c.computed.iter().find(|(n, _)| n == "E[rho^2]").unwrap().1;
        assert!(m2 < 0.9 * lip);
    }

    #[test]
    fn ratio_sandwich() {
        let (xs, us) = ratio_grids();
        for fam in ALL_FAMILIES {
            let c = check_density_ratio(fam, &xs, &us);
            assert!(c.pass, "{c}");
        }
        // the Gaussian lower bound is attained
        let x: f64 = 0.7;
        let u: f64 = 1.3;
        let fam = NoiseFamily::Normal;
        let ratio = (fam.log_density(x + u) - fam.log_density(x)).exp();
        assert!((ratio - (u * fam.score(x) - 0.5 * u * u).exp()).abs() < 1e-14);
        let at_zero = check_density_ratio(NoiseFamily::Logistic, &[0.3], &[0.0]);
        assert!(at_zero.pass);
    }

    #[test]
    fn linear_gaussian_scores() {
        let null = check_linear_score_gaussian(100_000, 1, &[0.0], 1.0, NoiseFamily::Normal).unwrap();
        assert!(null.pass, "{null}");
        assert!((null.computed[0].1 + 1.0).abs() < 0.02);
        let c = check_linear_score_gaussian(100_000, 2, &[1.0, 0.5], 2.0, NoiseFamily::Normal).unwrap();
        assert!(c.pass, "{c}");
        assert!((c.computed[0].1 + 0.5).abs() < 0.01);
        let t = check_linear_score_gaussian(20_000, 3, &[1.0], 1.0, NoiseFamily::T4).unwrap();
        assert!(t.informational && !t.failed());
    }

    #[test]
    fn grid_moments() {
        let c = check_grid(&QuadratureConfig::default()).unwrap();
        assert!(c.pass, "{c}");
    }

    #[test]
    fn suites_are_deterministic_and_pass() {
        let a = run_suite(Suite::All);
        assert!(a.iter().all(|c| !c.failed()), "{:?}", a.iter().filter(|c| c.failed()).collect::<Vec<_>>());
        assert_eq!(a, run_suite(Suite::All));
        assert!(Suite::from_str("nope").is_err());
    }
}
