//! Synthetic experiments: predictor and response generators, the exact
//! target parameter, repeated-experiment coverage and out-of-sample
//! nuisance errors.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{make_folds, Dataset};
use crate::distributions::NoiseFamily;
use crate::error::{Error, Result};
use crate::estimator::{
    difference_basis_estimate, drape_estimate_with, ols_ape, plr_estimate, ApeEstimate, Overrides,
};
use crate::numeric::{derive_seed, integrate_real_line, mean, median, population_sd};
use crate::regression::{from_fn, lasso_cv_lambda, GbtParams, Regressor};
use crate::resmooth::{diff_derivative, select_bandwidth, QuadratureGrid, SmoothedModel};
use crate::score::basis::basis_matrix;
use crate::score::{fit_basis_score, fit_location_scale_score};

/// Number of synthetic controls.
pub const CONTROLS: usize = 9;
/// Common correlation between synthetic controls.
pub const CONTROL_CORRELATION: f64 = 0.5;

/// `exp(-u^2/2) sin(a u)`.
pub fn sino(u: f64, a: f64) -> f64 {
    (-0.5 * u * u).exp() * (a * u).sin()
}

pub fn sino_derivative(u: f64, a: f64) -> f64 {
    (-0.5 * u * u).exp() * (a * (a * u).cos() - u * (a * u).sin())
}

/// `1 / (1 + exp(-s u))`.
pub fn sigm(u: f64, s: f64) -> f64 {
    1.0 / (1.0 + (-s * u).exp())
}

pub fn sigm_derivative(u: f64, s: f64) -> f64 {
    let v = sigm(u, s);
    s * v * (1.0 - v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseFamily {
    /// Partially linear: `x + sigm(z2; 1) + sino(z2; 1)`.
    Plm,
    /// Additive: `sigm(x; 1) + sino(x; 1) + sino(z2; 3)`.
    Add,
    /// Interaction: `sigm(x; 3) + sino(x; 3) + sino(z2; 3) + x z2`.
    Int,
}

pub const ALL_RESPONSES: [ResponseFamily; 3] = [ResponseFamily::Plm, ResponseFamily::Add, ResponseFamily::Int];

impl ResponseFamily {
    pub fn name(self) -> &'static str {
        match self {
            ResponseFamily::Plm => "plm",
            ResponseFamily::Add => "add",
            ResponseFamily::Int => "int",
        }
    }

    /// Regression function; only `x` and the second control enter.
    pub fn value(self, x: f64, z2: f64) -> f64 {
        match self {
            ResponseFamily::Plm => x + sigm(z2, 1.0) + sino(z2, 1.0),
            ResponseFamily::Add => sigm(x, 1.0) + sino(x, 1.0) + sino(z2, 3.0),
            ResponseFamily::Int => sigm(x, 3.0) + sino(x, 3.0) + sino(z2, 3.0) + x * z2,
        }
    }

    pub fn derivative(self, x: f64, z2: f64) -> f64 {
        match self {
            ResponseFamily::Plm => 1.0,
            ResponseFamily::Add => sigm_derivative(x, 1.0) + sino_derivative(x, 1.0),
            ResponseFamily::Int => sigm_derivative(x, 3.0) + sino_derivative(x, 3.0) + z2,
        }
    }
}

impl fmt::Display for ResponseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ResponseFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plm" => Ok(ResponseFamily::Plm),
            "add" => Ok(ResponseFamily::Add),
            "int" => Ok(ResponseFamily::Int),
            other => Err(Error::Config(format!("unknown response family `{other}`"))),
        }
    }
}

/// Predictors read from a file, centred and scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorTable {
    pub x: Vec<f64>,
    pub z: DMatrix<f64>,
    pub label: String,
}

impl PredictorTable {
    /// Reads a CSV with a header; `x_col` is the exposure and every other
    /// column is a control. Columns are standardized with the population sd.
    pub fn from_csv(path: impl AsRef<Path>, x_col: &str) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let label = path.file_stem().map_or("table".into(), |s| s.to_string_lossy().into_owned());
        Self::from_reader(file, x_col, &label)
    }

    pub fn from_reader<R: std::io::Read>(input: R, x_col: &str, label: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let xi = headers
            .iter()
            .position(|h| h == x_col)
            .ok_or_else(|| Error::MissingColumn(x_col.to_string()))?;
        let mut columns = vec![Vec::new(); headers.len()];
        for (r, record) in reader.records().enumerate() {
            let record = record?;
            for (c, cell) in record.iter().enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    row: r + 1,
                    column: headers[c].clone(),
                    message: format!("`{cell}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row: r + 1,
                        column: headers[c].clone(),
                        message: "non-finite value".into(),
                    });
                }
                columns[c].push(v);
            }
        }
        for (c, col) in columns.iter_mut().enumerate() {
            let m = mean(col);
            let s = population_sd(col);
            if !(s > 0.0) {
                return Err(Error::DegenerateColumn(headers[c].clone()));
            }
            col.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        let x = columns[xi].clone();
        let zcols: Vec<&Vec<f64>> = columns.iter().enumerate().filter(|(c, _)| *c != xi).map(|(_, v)| v).collect();
        if zcols.len() < 2 {
            return Err(Error::InsufficientData("the response needs at least two controls".into()));
        }
        let z = DMatrix::from_fn(x.len(), zcols.len(), |i, j| zcols[j][i]);
        Ok(Self {
            x,
            z,
            label: label.to_string(),
        })
    }

    pub fn rows(&self) -> usize {
        self.x.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictorSource {
    /// `Z ~ N(0, S)` with equicorrelated `S`, `X = 1{z1 > 0} + s(z3) eps`.
    Synthetic(NoiseFamily),
    /// Fixed predictors; any other row count draws rows with replacement.
    Table(Arc<PredictorTable>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSetting {
    pub response: ResponseFamily,
    pub predictors: PredictorSource,
    pub n: usize,
}

impl SimSetting {
    pub fn synthetic(response: ResponseFamily, noise: NoiseFamily, n: usize) -> Self {
        Self {
            response,
            predictors: PredictorSource::Synthetic(noise),
            n,
        }
    }

    pub fn noise(&self) -> Option<NoiseFamily> {
        match self.predictors {
            PredictorSource::Synthetic(f) => Some(f),
            PredictorSource::Table(_) => None,
        }
    }

    pub fn predictor_label(&self) -> String {
        match &self.predictors {
            PredictorSource::Synthetic(f) => f.name().to_string(),
            PredictorSource::Table(t) => t.label.clone(),
        }
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.response, self.predictor_label())
    }
}

/// Conditional mean of the synthetic exposure.
pub fn exposure_mean(z: &[f64]) -> f64 {
    if z[0] > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Conditional standard deviation of the synthetic exposure.
pub fn exposure_scale(z: &[f64]) -> f64 {
    if z[2] < 0.0 {
        1.5f64.sqrt()
    } else {
        0.5f64.sqrt()
    }
}

/// Exact conditional score of the synthetic exposure.
pub fn true_score(noise: NoiseFamily, x: f64, z: &[f64]) -> f64 {
    let s = exposure_scale(z);
    noise.score((x - exposure_mean(z)) / s) / s
}

fn control_cholesky() -> DMatrix<f64> {
    let sigma = DMatrix::from_fn(CONTROLS, CONTROLS, |a, b| if a == b { 1.0 } else { CONTROL_CORRELATION });
    sigma.cholesky().expect("equicorrelation matrix is positive definite").l()
}

pub fn gen_predictors(setting: &SimSetting, n: usize, seed: u64) -> (Vec<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match &setting.predictors {
        PredictorSource::Synthetic(noise) => {
            let l = control_cholesky();
            let mut x = Vec::with_capacity(n);
            let mut z = DMatrix::zeros(n, CONTROLS);
            let mut w = [0.0; CONTROLS];
            let mut row = [0.0; CONTROLS];
            for i in 0..n {
                for v in w.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                for a in 0..CONTROLS {
                    row[a] = (0..=a).map(|b| l[(a, b)] * w[b]).sum();
                    z[(i, a)] = row[a];
                }
                let eps = noise.draw(&mut rng);
                x.push(exposure_mean(&row) + exposure_scale(&row) * eps);
            }
            (x, z)
        }
        PredictorSource::Table(t) => {
            if n == t.rows() {
                return (t.x.clone(), t.z.clone());
            }
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..t.rows())).collect();
            let x = rows.iter().map(|&i| t.x[i]).collect();
            (x, t.z.select_rows(rows.iter()))
        }
    }
}

/// `y = f(x, z) + N(0, 1)`.
pub fn gen_response(setting: &SimSetting, x: &[f64], z: &DMatrix<f64>, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..x.len())
        .map(|i| setting.response.value(x[i], z[(i, 1)]) + rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn gen_dataset(setting: &SimSetting, n: usize, seed: u64) -> Result<Dataset> {
    let (x, z) = gen_predictors(setting, n, derive_seed(seed, 1));
    let y = gen_response(setting, &x, &z, derive_seed(seed, 2));
    Dataset::from_parts(y, x, z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloValue {
    pub value: f64,
    pub std_error: f64,
}

/// Mean of the analytic derivative over `mc_n` fresh predictor draws.
pub fn true_ape(setting: &SimSetting, mc_n: usize, seed: u64) -> MonteCarloValue {
    let (x, z) = gen_predictors(setting, mc_n, seed);
    let d: Vec<f64> = (0..mc_n).map(|i| setting.response.derivative(x[i], z[(i, 1)])).collect();
    MonteCarloValue {
        value: mean(&d),
        std_error: population_sd(&d) / (mc_n as f64).sqrt(),
    }
}

/// The target parameter without Monte Carlo error. For synthetic predictors
/// the sign pattern of `(z1, z3)` has probabilities 1/3 (agree) and 1/6
/// (disagree) per cell, and the remaining expectation over the noise is a
/// one-dimensional integral. For tabulated predictors the population is the
/// table itself.
pub fn exact_true_ape(setting: &SimSetting) -> Result<f64> {
    let resp = setting.response;
    match &setting.predictors {
        PredictorSource::Table(t) => {
            let d: Vec<f64> = (0..t.rows()).map(|i| resp.derivative(t.x[i], t.z[(i, 1)])).collect();
            Ok(mean(&d))
        }
        PredictorSource::Synthetic(_) if resp == ResponseFamily::Plm => Ok(1.0),
        PredictorSource::Synthetic(noise) => {
            let wide = 1.5f64.sqrt();
            let narrow = 0.5f64.sqrt();
            // (mean, scale, probability); the interaction term averages E[Z2] = 0
            let cells = [
                (1.0, wide, 1.0 / 6.0),
                (1.0, narrow, 1.0 / 3.0),
                (0.0, wide, 1.0 / 3.0),
                (0.0, narrow, 1.0 / 6.0),
            ];
            let mut total = 0.0;
            for (m, s, p) in cells {
                let inner = integrate_real_line(|e| resp.derivative(m + s * e, 0.0) * noise.density(e), 1e-12)?;
                total += p * inner;
            }
            Ok(total)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoverageMethod {
    Drape,
    Diffbasis,
    Plr,
    Ols,
    /// The resmoothing estimator with the true regression, derivative and
    /// score plugged in.
    Oracle,
}

pub const ALL_METHODS: [CoverageMethod; 5] = [
    CoverageMethod::Drape,
    CoverageMethod::Diffbasis,
    CoverageMethod::Plr,
    CoverageMethod::Ols,
    CoverageMethod::Oracle,
];

impl CoverageMethod {
    pub fn name(self) -> &'static str {
        match self {
            CoverageMethod::Drape => "drape",
            CoverageMethod::Diffbasis => "diffbasis",
            CoverageMethod::Plr => "plr",
            CoverageMethod::Ols => "ols",
            CoverageMethod::Oracle => "oracle",
        }
    }
}

impl fmt::Display for CoverageMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CoverageMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_METHODS
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Overrides that plug the data-generating nuisances into the estimator.
pub fn oracle_overrides(setting: &SimSetting) -> Result<Overrides> {
    let noise = setting
        .noise()
        .ok_or_else(|| Error::Config("oracle nuisances need synthetic predictors".into()))?;
    let resp = setting.response;
    Ok(Overrides {
        regression: Some(from_fn(move |row| resp.value(row[0], row[2]))),
        gradient: Some(Arc::new(move |row: &[f64], _| resp.derivative(row[0], row[2]))),
        score: Some(Arc::new(move |row: &[f64], _| true_score(noise, row[0], &row[1..]))),
        ..Default::default()
    })
}

/// Runs `method` on one dataset with folds drawn from `seed`.
pub fn estimate_once(setting: &SimSetting, method: CoverageMethod, ds: &Dataset, seed: u64, cfg: &RunConfig) -> Result<ApeEstimate> {
    let mut cfg = cfg.clone();
    cfg.seed = derive_seed(seed, 4);
    let folds = make_folds(ds.n(), cfg.folds, derive_seed(seed, 3))?;
    match method {
        CoverageMethod::Drape => drape_estimate_with(ds, &folds, &cfg, &Overrides::default()).map(|r| r.0),
        CoverageMethod::Oracle => drape_estimate_with(ds, &folds, &cfg, &oracle_overrides(setting)?).map(|r| r.0),
        CoverageMethod::Diffbasis => difference_basis_estimate(ds, &folds, &cfg).map(|r| r.0),
        CoverageMethod::Plr => plr_estimate(ds, &folds, &cfg).map(|r| r.0),
        CoverageMethod::Ols => ols_ape(ds, cfg.alpha, cfg.seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRecord {
    pub repeat: usize,
    pub seed: u64,
    pub theta: Option<f64>,
    pub std_error: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub covered: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub setting: String,
    pub method: CoverageMethod,
    pub repeats: usize,
    pub n: usize,
    pub seed: u64,
    pub alpha: f64,
    pub truth: f64,
    pub coverage: f64,
    pub median_width: Option<f64>,
    pub mean_theta: Option<f64>,
    /// Repeats whose estimation failed; they count as not covering.
    pub failures: usize,
    pub config_digest: String,
    pub records: Vec<CoverageRecord>,
}

impl CoverageReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Per-repeat records as CSV.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn records_from_csv(text: &str) -> Result<Vec<CoverageRecord>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
    }

    pub fn summary_line(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.4}"));
        format!(
            "{} {} n={} repeats={} coverage={:.3} truth={:.4} mean_theta={} median_width={} failures={}",
            self.setting,
            self.method,
            self.n,
            self.repeats,
            self.coverage,
            self.truth,
            fmt(self.mean_theta),
            fmt(self.median_width),
            self.failures
        )
    }
}

/// Repeated experiments; repeat `r` uses seed `derive_seed(seed, r)` so a
/// longer run extends a shorter one record for record.
pub fn run_coverage(
    setting: &SimSetting,
    method: CoverageMethod,
    repeats: usize,
    seed: u64,
    cfg: &RunConfig,
) -> Result<CoverageReport> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    cfg.validate()?;
    let truth = exact_true_ape(setting)?;
    let records: Vec<CoverageRecord> = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let rs = derive_seed(seed, r as u64);
            let est = gen_dataset(setting, setting.n, rs).and_then(|ds| estimate_once(setting, method, &ds, rs, cfg));
            match est {
                Ok(e) => CoverageRecord {
                    repeat: r,
                    seed: rs,
                    theta: Some(e.theta[0]),
                    std_error: Some(e.std_errors()[0]),
                    lower: Some(e.ci[0][0]),
                    upper: Some(e.ci[0][1]),
                    covered: e.covers(0, truth),
                    error: None,
                },
                Err(err) => CoverageRecord {
                    repeat: r,
                    seed: rs,
                    theta: None,
                    std_error: None,
                    lower: None,
                    upper: None,
                    covered: false,
                    error: Some(err.to_string()),
                },
            }
        })
        .collect();
    let ok: Vec<&CoverageRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let widths: Vec<f64> = ok.iter().map(|r| r.upper.unwrap() - r.lower.unwrap()).collect();
    let thetas: Vec<f64> = ok.iter().map(|r| r.theta.unwrap()).collect();
    Ok(CoverageReport {
        setting: setting.label(),
        method,
        repeats,
        n: setting.n,
        seed,
        alpha: cfg.alpha,
        truth,
        coverage: records.iter().filter(|r| r.covered).count() as f64 / repeats as f64,
        median_width: (!widths.is_empty()).then(|| median(&widths)),
        mean_theta: (!thetas.is_empty()).then(|| mean(&thetas)),
        failures: repeats - ok.len(),
        config_digest: String::new(),
        records,
    })
}

/// Interval strips of a coverage report, one horizontal segment per repeat
/// with the target as a vertical line. Intervals missing the target are red.
pub fn coverage_svg(report: &CoverageReport) -> String {
    let (width, row_h, margin) = (640.0, 4.0, 40.0);
    let ok: Vec<&CoverageRecord> = report.records.iter().filter(|r| r.error.is_none()).collect();
    let mut lo = report.truth;
    let mut hi = report.truth;
    for r in &ok {
        lo = lo.min(r.lower.unwrap());
        hi = hi.max(r.upper.unwrap());
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let sx = |v: f64| margin + (v - lo) / (hi - lo) * (width - 2.0 * margin);
    let height = 2.0 * margin + row_h * report.records.len() as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    );
    out.push_str(&format!(
        "<text x=\"{margin}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{} {}: coverage {:.3}</text>\n",
        margin / 2.0,
        report.setting,
        report.method,
        report.coverage
    ));
    for (k, r) in report.records.iter().enumerate() {
        if let (Some(a), Some(b)) = (r.lower, r.upper) {
            let y = margin + row_h * (k as f64 + 0.5);
            let colour = if r.covered { "#4a6fa5" } else { "#c0392b" };
            out.push_str(&format!(
                "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{colour}\" stroke-width=\"1.5\"/>\n",
                sx(a),
                sx(b)
            ));
        }
    }
    let tx = sx(report.truth);
    out.push_str(&format!(
        "<line x1=\"{tx:.2}\" y1=\"{margin}\" x2=\"{tx:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-width=\"1\"/>\n",
        height - margin
    ));
    out.push_str(&format!(
        "<text x=\"{margin}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\">{lo:.3}</text>\n",
        height - margin / 3.0
    ));
    out.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{hi:.3}</text>\n",
        width - margin,
        height - margin / 3.0
    ));
    out.push_str("</svg>\n");
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseEntry {
    pub repeat: usize,
    /// `score`, `derivative` or `regression`.
    pub target: String,
    pub method: String,
    pub mse: f64,
}

/// Out-of-sample squared errors of every nuisance for one train/test draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub setting: String,
    pub seed: u64,
    pub bandwidth: f64,
    pub entries: Vec<MseEntry>,
}

impl MseReport {
    pub fn get(&self, target: &str, method: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.target == target && e.method == method)
            .map(|e| e.mse)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / a.len() as f64
}

/// Fits each nuisance on a training draw and scores it against the analytic
/// truth on an independent test draw.
pub fn nuisance_mse(setting: &SimSetting, n_train: usize, n_test: usize, seed: u64, cfg: &RunConfig) -> Result<MseReport> {
    nuisance_mse_repeat(setting, n_train, n_test, seed, 0, cfg)
}

fn nuisance_mse_repeat(
    setting: &SimSetting,
    n_train: usize,
    n_test: usize,
    seed: u64,
    repeat: usize,
    cfg: &RunConfig,
) -> Result<MseReport> {
    let noise = setting
        .noise()
        .ok_or_else(|| Error::Config("nuisance errors need synthetic predictors".into()))?;
    cfg.validate()?;
    let resp = setting.response;
    let train = gen_dataset(setting, n_train, derive_seed(seed, 1))?;
    let test = gen_dataset(setting, n_test, derive_seed(seed, 2))?;
    let x_train = train.x_column(0);
    let x_test = test.x_column(0);
    let zrow = |ds: &Dataset, i: usize| -> Vec<f64> { ds.z.row(i).iter().copied().collect() };
    let mut entries = Vec::new();
    let mut push = |target: &str, method: &str, value: f64| {
        entries.push(MseEntry {
            repeat,
            target: target.into(),
            method: method.into(),
            mse: value,
        })
    };

    // scores
    let rho_true: Vec<f64> = (0..n_test).map(|i| true_score(noise, x_test[i], &zrow(&test, i))).collect();
    let ls = fit_location_scale_score(
        &x_train,
        &train.z,
        &crate::score::LocationScaleSpec {
            mean: cfg.exposure.clone(),
            scale_tree: cfg.scale_tree.clone(),
            scale_floor: cfg.scale_floor,
            spline_df: cfg.spline_df,
        },
        derive_seed(seed, 3),
    )?;
    let rho_spline: Vec<f64> = (0..n_test).map(|i| ls.model.eval(x_test[i], &zrow(&test, i))).collect();
    push("score", "spline", mse(&rho_spline, &rho_true));
    let lambda = match cfg.basis_lambda {
        Some(l) => l,
        None => lasso_cv_lambda(&basis_matrix(&x_train, &train.z), &x_train, cfg.folds, derive_seed(seed, 4))?,
    };
    let basis = fit_basis_score(&x_train, &train.z, lambda)?;
    let rho_basis: Vec<f64> = (0..n_test).map(|i| basis.eval(x_test[i], &zrow(&test, i))).collect();
    push("score", "basis", mse(&rho_basis, &rho_true));
    let rho_oracle: Vec<f64> = (0..n_test).map(|i| true_score(noise, x_test[i], &zrow(&test, i))).collect();
    push("score", "oracle", mse(&rho_oracle, &rho_true));

    // regression and derivatives
    let features = train.features();
    let model = cfg.outcome.fit(&features, &train.y, derive_seed(seed, 5))?;
    let grid = QuadratureGrid::new(cfg.quadrature.points, cfg.quadrature.span)?;
    let folds = make_folds(n_train, cfg.folds, derive_seed(seed, 6))?;
    let candidates = cfg.bandwidth.candidates(population_sd(&x_train));
    let selection = select_bandwidth(
        &train,
        &folds,
        &cfg.outcome,
        &candidates,
        cfg.bandwidth.tol,
        &grid,
        derive_seed(seed, 7),
        0,
    )?;
    let smooth = SmoothedModel::new(model.clone(), vec![selection.chosen], Arc::new(grid))?;
    let step = population_sd(&x_train) / 4.0;
    let test_features = test.features();
    let mut f_true = Vec::with_capacity(n_test);
    let mut d_true = Vec::with_capacity(n_test);
    let mut f_hat = Vec::with_capacity(n_test);
    let mut d_smooth = Vec::with_capacity(n_test);
    let mut d_diff = Vec::with_capacity(n_test);
    for i in 0..n_test {
        let row: Vec<f64> = test_features.row(i).iter().copied().collect();
        f_true.push(resp.value(row[0], row[2]));
        d_true.push(resp.derivative(row[0], row[2]));
        f_hat.push(model.predict(&row));
        d_smooth.push(smooth.derivative(&row, 0));
        d_diff.push(diff_derivative(model.as_ref(), &row, 0, step));
    }
    push("regression", "gbt", mse(&f_hat, &f_true));
    push("derivative", "resmooth", mse(&d_smooth, &d_true));
    push("derivative", "difference", mse(&d_diff, &d_true));

    Ok(MseReport {
        setting: setting.label(),
        seed,
        bandwidth: selection.chosen,
        entries,
    })
}

/// `repeats` independent train/test draws with seeds `derive_seed(seed, r)`.
pub fn run_mse(
    setting: &SimSetting,
    n_train: usize,
    n_test: usize,
    repeats: usize,
    seed: u64,
    cfg: &RunConfig,
) -> Result<Vec<MseReport>> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    (0..repeats)
        .into_par_iter()
        .map(|r| nuisance_mse_repeat(setting, n_train, n_test, derive_seed(seed, r as u64), r, cfg))
        .collect()
}

/// Mean and standard error per `(target, method)` across repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseSummary {
    pub target: String,
    pub method: String,
    pub mean: f64,
    pub std_error: f64,
    pub repeats: usize,
}

pub fn summarize_mse(reports: &[MseReport]) -> Vec<MseSummary> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for e in reports.iter().flat_map(|r| &r.entries) {
        let key = (e.target.clone(), e.method.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(target, method)| {
            let v: Vec<f64> = reports.iter().filter_map(|r| r.get(&target, &method)).collect();
            MseSummary {
                mean: mean(&v),
                std_error: if v.len() > 1 {
                    population_sd(&v) * (v.len() as f64 / (v.len() - 1) as f64).sqrt() / (v.len() as f64).sqrt()
                } else {
                    0.0
                },
                repeats: v.len(),
                target,
                method,
            }
        })
        .collect()
}

pub fn mse_entries_csv(reports: &[MseReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in reports.iter().flat_map(|r| &r.entries) {
        w.serialize(e)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Which nuisance learner a hyperparameter search targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuneTarget {
    /// `Y` on `(X, Z)`.
    Outcome,
    /// `X` on `Z`.
    Exposure,
}

impl FromStr for TuneTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "outcome" => Ok(TuneTarget::Outcome),
            "exposure" => Ok(TuneTarget::Exposure),
            other => Err(Error::Config(format!("unknown tuning target `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneTrial {
    pub params: GbtParams,
    /// Held-out squared error averaged over the tuning datasets.
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub setting: String,
    pub target: TuneTarget,
    pub trials: Vec<TuneTrial>,
    pub best: GbtParams,
}

/// Random search over boosting hyperparameters. Each candidate is scored by
/// held-out error on `datasets` simulated draws of size `n`, trained on the
/// first 80% of rows. The search space is rounds in [50, 500], learning
/// rate in [0.02, 0.3] (log scale), depth in 1..=5 and minimum leaf size in
/// {5, 10, 20, 50}.
pub fn tune_gbt(
    setting: &SimSetting,
    target: TuneTarget,
    trials: usize,
    datasets: usize,
    n: usize,
    seed: u64,
) -> Result<TuneReport> {
    if trials == 0 || datasets == 0 {
        return Err(Error::Config("trials and datasets must be at least 1".into()));
    }
    let n_train = n * 4 / 5;
    if n_train < 20 || n - n_train < 1 {
        return Err(Error::InsufficientData(format!("n = {n} is too small to tune on")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaves = [5, 10, 20, 50];
    let candidates: Vec<GbtParams> = (0..trials)
        .map(|_| GbtParams {
            rounds: rng.random_range(50..=500),
            learning_rate: (rng.random_range(0.02f64.ln()..0.3f64.ln())).exp(),
            max_depth: rng.random_range(1..=5),
            min_leaf: leaves[rng.random_range(0..leaves.len())],
            ..Default::default()
        })
        .collect();
    let data: Vec<Dataset> = (0..datasets)
        .map(|d| gen_dataset(setting, n, derive_seed(seed, 1 + d as u64)))
        .collect::<Result<_>>()?;
    let trials: Vec<TuneTrial> = candidates
        .into_par_iter()
        .map(|params| {
            let mut total = 0.0;
            for (d, ds) in data.iter().enumerate() {
                let (features, targets) = match target {
                    TuneTarget::Outcome => (ds.features(), ds.y.clone()),
                    TuneTarget::Exposure => (ds.z.clone(), ds.x_column(0)),
                };
                let train: Vec<usize> = (0..n_train).collect();
                let xt = features.select_rows(train.iter());
                let fit_params = GbtParams {
                    seed: derive_seed(seed, 10_000 + d as u64),
                    ..params.clone()
                };
                let model = crate::regression::fit_gbt(&fit_params, &xt, &targets[..n_train])?;
                let mut se = 0.0;
                for i in n_train..n {
                    let row: Vec<f64> = features.row(i).iter().copied().collect();
                    se += (targets[i] - model.predict(&row)).powi(2);
                }
                total += se / (n - n_train) as f64;
            }
            Ok(TuneTrial {
                params,
                mse: total / data.len() as f64,
            })
        })
        .collect::<Result<_>>()?;
    let best = trials
        .iter()
        .min_by(|a, b| a.mse.total_cmp(&b.mse))
        .map(|t| t.params.clone())
        .expect("at least one trial");
    Ok(TuneReport {
        setting: setting.label(),
        target,
        trials,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::population_variance;
    use crate::regression::{GbtParams, RegressorSpec};

    #[test]
    fn response_function_values() {
        assert_eq!(sino(0.0, 3.0), 0.0);
        assert_eq!(sigm(0.0, 2.0), 0.5);
        assert!((ResponseFamily::Int.derivative(0.0, 1.0) - 4.75).abs() < 1e-15);
        for (x, z) in [(-1.0, 0.3), (0.4, -2.0), (2.2, 1.1)] {
            assert_eq!(ResponseFamily::Plm.derivative(x, z), 1.0);
            for resp in ALL_RESPONSES {
                let h = 1e-5;
                let fd = (resp.value(x + h, z) - resp.value(x - h, z)) / (2.0 * h);
                assert!((fd - resp.derivative(x, z)).abs() < 1e-8, "{resp} {x}");
            }
        }
    }

    #[test]
    fn predictor_law() {
        let s = SimSetting::synthetic(ResponseFamily::Add, NoiseFamily::Normal, 1000);
        let n = 100_000;
        let (x, z) = gen_predictors(&s, n, 11);
        let z1: Vec<f64> = z.column(0).iter().copied().collect();
        let z2: Vec<f64> = z.column(1).iter().copied().collect();
        let cov = z1.iter().zip(&z2).map(|(a, b)| a * b).sum::<f64>() / n as f64 - mean(&z1) * mean(&z2);
        let corr = cov / (population_sd(&z1) * population_sd(&z2));
        assert!((0.48..=0.52).contains(&corr), "{corr}");
        assert!((population_variance(&z1) - 1.0).abs() < 0.02);
        // residual variance given z averages E[s^2(Z)] = 1
        let resid: Vec<f64> = (0..n).map(|i| x[i] - exposure_mean(&[z[(i, 0)]])).collect();
        assert!((population_variance(&resid) - 1.0).abs() < 0.02);
        let (x2, z2b) = gen_predictors(&s, 50, 11);
        assert_eq!(&x2[..], &x[..50]);
        assert_eq!(z2b.row(3), z.row(3));
    }

    #[test]
    fn mean_squared_scale_is_one() {
        let s = SimSetting::synthetic(ResponseFamily::Plm, NoiseFamily::Normal, 1000);
        let (_, z) = gen_predictors(&s, 1_000_000, 5);
        let v: Vec<f64> = (0..z.nrows()).map(|i| exposure_scale(&[0.0, 0.0, z[(i, 2)]]).powi(2)).collect();
        let m = mean(&v);
        assert!((0.995..=1.005).contains(&m), "{m}");
    }

    #[test]
    fn response_noise_is_standard_normal() {
        let s = SimSetting::synthetic(ResponseFamily::Int, NoiseFamily::T4, 1000);
        let n = 100_000;
        let (x, z) = gen_predictors(&s, n, 1);
        let y = gen_response(&s, &x, &z, 2);
        let e: Vec<f64> = (0..n).map(|i| y[i] - s.response.value(x[i], z[(i, 1)])).collect();
        let v = population_variance(&e);
        assert!((0.95..=1.05).contains(&v), "{v}");
    }

    #[test]
    fn plm_target_is_one() {
        let s = SimSetting::synthetic(ResponseFamily::Plm, NoiseFamily::Mix3, 1000);
        let t = true_ape(&s, 100_000, 3);
        assert_eq!(t.value, 1.0);
        assert_eq!(exact_true_ape(&s).unwrap(), 1.0);
    }

    #[test]
    fn monte_carlo_target_agrees_with_quadrature() {
        for noise in [NoiseFamily::Normal, NoiseFamily::T4] {
            for resp in [ResponseFamily::Add, ResponseFamily::Int] {
                let s = SimSetting::synthetic(resp, noise, 1000);
                let exact = exact_true_ape(&s).unwrap();
                let a = true_ape(&s, 1_000_000, 10);
                let b = true_ape(&s, 1_000_000, 11);
                let combined = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
                assert!((a.value - b.value).abs() < 3.0 * combined, "{resp}/{noise} {} {} {}", a.value, b.value, combined);
                assert!((a.value - exact).abs() < 3.0 * a.std_error, "{resp}/{noise} {} {exact}", a.value);
            }
        }
    }

    #[test]
    fn interaction_term_averages_to_zero() {
        let s = SimSetting::synthetic(ResponseFamily::Int, NoiseFamily::Normal, 1000);
        let (_, z) = gen_predictors(&s, 200_000, 9);
        let z2: Vec<f64> = z.column(1).iter().copied().collect();
        let se = population_sd(&z2) / (z2.len() as f64).sqrt();
        assert!(mean(&z2).abs() < 3.0 * se);
    }

    #[test]
    fn table_predictors_are_standardized() {
        let text = "inc,age,edu\n1,20,3\n2,30,1\n4,25,2\n3,40,5\n";
        let t = PredictorTable::from_reader(text.as_bytes(), "inc", "toy").unwrap();
        assert_eq!(t.rows(), 4);
        assert_eq!(t.z.ncols(), 2);
        assert!(mean(&t.x).abs() < 1e-15);
        assert!((population_sd(&t.x) - 1.0).abs() < 1e-12);
        let s = SimSetting {
            response: ResponseFamily::Add,
            predictors: PredictorSource::Table(Arc::new(t.clone())),
            n: 4,
        };
        let (x, _) = gen_predictors(&s, 4, 0);
        assert_eq!(x, t.x);
        let exact = exact_true_ape(&s).unwrap();
        let mc = true_ape(&s, 4, 0);
        assert_eq!(exact, mc.value);
        assert!(PredictorTable::from_reader("a,b\n1,2\n3,4\n".as_bytes(), "a", "t").is_err());
    }

    fn quick_config() -> RunConfig {
        let small = RegressorSpec::Gbt(GbtParams {
            rounds: 30,
            learning_rate: 0.1,
            max_depth: 2,
            min_leaf: 10,
            ..Default::default()
        });
        RunConfig {
            outcome: small.clone(),
            exposure: small.clone(),
            response_on_controls: small,
            ..Default::default()
        }
    }

    #[test]
    fn single_repeat_coverage_is_binary_and_ladders_extend() {
        let s = SimSetting::synthetic(ResponseFamily::Plm, NoiseFamily::Normal, 200);
        let cfg = quick_config();
        let one = run_coverage(&s, CoverageMethod::Ols, 1, 7, &cfg).unwrap();
        assert!(one.coverage == 0.0 || one.coverage == 1.0);
        let three = run_coverage(&s, CoverageMethod::Ols, 3, 7, &cfg).unwrap();
        assert_eq!(one.records[0], three.records[0]);
        assert_eq!(three.records.len(), 3);
        assert!(run_coverage(&s, CoverageMethod::Ols, 0, 7, &cfg).is_err());
    }

    #[test]
    fn oracle_coverage_on_the_partially_linear_model() {
        let s = SimSetting::synthetic(ResponseFamily::Plm, NoiseFamily::Normal, 1000);
        let report = run_coverage(&s, CoverageMethod::Oracle, 200, 21, &quick_config()).unwrap();
        assert_eq!(report.failures, 0);
        assert!((0.90..=0.99).contains(&report.coverage), "{}", report.coverage);
    }

    #[test]
    fn report_round_trips() {
        let s = SimSetting::synthetic(ResponseFamily::Add, NoiseFamily::Logistic, 150);
        let report = run_coverage(&s, CoverageMethod::Plr, 2, 3, &quick_config()).unwrap();
        let back = CoverageReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
        let recs = CoverageReport::records_from_csv(&report.to_csv().unwrap()).unwrap();
        assert_eq!(recs, report.records);
        let svg = coverage_svg(&report);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn tuning_picks_the_lowest_error() {
        let s = SimSetting::synthetic(ResponseFamily::Add, NoiseFamily::Normal, 0);
        let r = tune_gbt(&s, TuneTarget::Outcome, 3, 2, 200, 1).unwrap();
        assert_eq!(r.trials.len(), 3);
        let min = r.trials.iter().map(|t| t.mse).fold(f64::INFINITY, f64::min);
        assert!(r.trials.iter().any(|t| t.mse == min && t.params == r.best));
        assert_eq!(r, tune_gbt(&s, TuneTarget::Outcome, 3, 2, 200, 1).unwrap());
        assert!(tune_gbt(&s, TuneTarget::Exposure, 0, 2, 200, 1).is_err());
    }

    #[test]
    fn oracle_score_has_zero_error() {
        let s = SimSetting::synthetic(ResponseFamily::Int, NoiseFamily::Mix2, 0);
        let mut cfg = quick_config();
        cfg.basis_lambda = Some(0.01);
        let r = nuisance_mse(&s, 300, 200, 4, &cfg).unwrap();
        assert_eq!(r.get("score", "oracle"), Some(0.0));
        for (t, m) in [("score", "spline"), ("score", "basis"), ("derivative", "resmooth"), ("derivative", "difference"), ("regression", "gbt")] {
            assert!(r.get(t, m).unwrap().is_finite(), "{t} {m}");
        }
    }

    #[test]
    fn ols_slope_on_the_additive_setting_is_near_the_truth() {
        // the linear projection slope nearly equals the average derivative
        // here, so OLS intervals are close to nominal in this setting
        let s = SimSetting::synthetic(ResponseFamily::Add, NoiseFamily::Normal, 1000);
        let ds = gen_dataset(&s, 200_000, 3).unwrap();
        let e = crate::estimator::ols_ape(&ds, 0.05, 0).unwrap();
        let truth = exact_true_ape(&s).unwrap();
        assert!((e.theta[0] - truth).abs() < 0.01, "{} vs {truth}", e.theta[0]);
        let int = SimSetting::synthetic(ResponseFamily::Int, NoiseFamily::Normal, 1000);
        let ds = gen_dataset(&int, 200_000, 3).unwrap();
        let e = crate::estimator::ols_ape(&ds, 0.05, 0).unwrap();
        assert!(exact_true_ape(&int).unwrap() - e.theta[0] > 0.1);
    }
}
