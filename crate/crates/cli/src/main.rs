//! `drape`: estimate average partial effects from CSV data, run coverage
//! and nuisance-error experiments, and run the numerical checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use drape_core::config::RunConfig;
use drape_core::data::{load_csv, make_folds, standardize, write_csv};
use drape_core::distributions::NoiseFamily;
use drape_core::estimator::{estimate, ApeEstimate, Method};
use drape_core::regression::RegressorSpec;
use drape_core::sim::{
    coverage_svg, gen_dataset, mse_entries_csv, run_coverage, run_mse, summarize_mse, tune_gbt, CoverageMethod,
    CoverageReport, PredictorSource, PredictorTable, ResponseFamily, SimSetting, TuneTarget,
};
use drape_core::verify::{run_suite, Suite};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "drape", version, about = "Average partial effects with resmoothed plug-ins and spline scores")]
struct Cli {
    /// Worker threads (defaults to the number of logical cores).
    #[arg(long, global = true, env = "DRAPE_THREADS")]
    threads: Option<usize>,

    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the average partial effect of the exposure columns.
    Estimate(EstimateArgs),
    /// Repeated-experiment coverage on a simulated setting.
    Simulate(SimulateArgs),
    /// Numerical verification suites.
    Verify(VerifyArgs),
    /// Random search over boosting hyperparameters on simulated data.
    Tune(TuneArgs),
    /// Out-of-sample nuisance errors against the analytic truth.
    Mse(MseArgs),
    /// Render a coverage report as SVG interval strips.
    Plot(PlotArgs),
    /// Write one simulated dataset as CSV.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct RunFlags {
    /// Number of cross-fitting folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Confidence level is 1 - alpha.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Input CSV with a header row.
    input: PathBuf,
    /// Exposure columns (comma separated or repeated).
    #[arg(long, value_delimiter = ',', required = true)]
    x: Vec<String>,
    /// Response column.
    #[arg(long)]
    y: String,
    #[arg(long, default_value = "drape")]
    method: String,
    /// Centre and scale predictors before fitting; estimates are reported in
    /// the original units.
    #[arg(long)]
    standardize: bool,
    #[command(flatten)]
    run: RunFlags,
    /// Output JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SettingArgs {
    /// Response family: plm, add or int.
    #[arg(long, default_value = "plm")]
    setting: String,
    /// Exposure noise: normal, mix2, mix3, logistic or t4.
    #[arg(long, default_value = "normal")]
    noise: String,
    /// Use predictors from this CSV instead of the synthetic law.
    #[arg(long)]
    predictors: Option<PathBuf>,
    /// Exposure column of the predictor CSV.
    #[arg(long, default_value = "x")]
    predictor_x: String,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    setting: SettingArgs,
    #[arg(long, default_value = "drape")]
    method: String,
    #[arg(long, default_value_t = 200)]
    repeats: usize,
    /// Sample size per repeat (defaults to the predictor table size when a
    /// table is given).
    #[arg(long)]
    n: Option<usize>,
    #[command(flatten)]
    run: RunFlags,
    /// Per-repeat records as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// all, prop1, thm3, lem1, thmB1 or grid.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Write the results as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    setting: SettingArgs,
    /// outcome or exposure.
    #[arg(long, default_value = "outcome")]
    target: String,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 10)]
    datasets: usize,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the configuration with the tuned learner as TOML.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MseArgs {
    #[command(flatten)]
    setting: SettingArgs,
    #[arg(long, default_value_t = 800)]
    n_train: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[command(flatten)]
    run: RunFlags,
    /// Per-repeat errors as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Summary and per-repeat errors as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Coverage report JSON written by `simulate --json`.
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    setting: SettingArgs,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Failures split by exit code: bad input is a usage error (2), anything
/// that fails while computing is a run failure (1).
enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

type CmdResult<T> = std::result::Result<T, Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn run_err<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Run(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> CmdResult<ExitCode> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(usage(anyhow::anyhow!("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(run_err)?;
    }
    let base = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Estimate(a) => cmd_estimate(a, base),
        Command::Simulate(a) => cmd_simulate(a, base),
        Command::Verify(a) => cmd_verify(a),
        Command::Tune(a) => cmd_tune(a, base),
        Command::Mse(a) => cmd_mse(a, base),
        Command::Plot(a) => cmd_plot(a),
        Command::Generate(a) => cmd_generate(a),
    }
}

fn load_config(path: Option<&Path>) -> CmdResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(usage)?;
            RunConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display())).map_err(usage)
        }
    }
}

fn apply_flags(mut cfg: RunConfig, flags: &RunFlags) -> CmdResult<RunConfig> {
    if let Some(k) = flags.folds {
        cfg.folds = k;
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(a) = flags.alpha {
        cfg.alpha = a;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// Hex SHA-256 of the effective configuration rendered as TOML.
fn config_digest(cfg: &RunConfig) -> CmdResult<String> {
    let text = cfg.to_toml().map_err(run_err)?;
    let hash = Sha256::digest(text.as_bytes());
    Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_output(path: &Path, text: &str) -> CmdResult<()> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(run_err)
}

fn parse_setting(a: &SettingArgs, n: Option<usize>) -> CmdResult<SimSetting> {
    let response: ResponseFamily = a.setting.parse().map_err(usage)?;
    match &a.predictors {
        None => {
            let noise: NoiseFamily = a.noise.parse().map_err(|e: String| usage(anyhow::anyhow!(e)))?;
            Ok(SimSetting::synthetic(response, noise, n.unwrap_or(1000)))
        }
        Some(path) => {
            let table = PredictorTable::from_csv(path, &a.predictor_x).map_err(usage)?;
            let rows = table.rows();
            Ok(SimSetting {
                response,
                predictors: PredictorSource::Table(Arc::new(table)),
                n: n.unwrap_or(rows),
            })
        }
    }
}

fn cmd_estimate(a: EstimateArgs, base: RunConfig) -> CmdResult<ExitCode> {
    let method: Method = a.method.parse().map_err(usage)?;
    let cfg = apply_flags(base, &a.run)?;
    let digest = config_digest(&cfg)?;
    let raw = load_csv(&a.input, &a.x, &a.y).map_err(usage)?;
    let (ds, scaling) = if a.standardize {
        let (s, rec) = standardize(&raw).map_err(run_err)?;
        (s, Some(rec))
    } else {
        (raw, None)
    };
    let folds = make_folds(ds.n(), cfg.folds, cfg.seed).map_err(usage)?;
    let mut est = estimate(method, &ds, &folds, &cfg).map_err(run_err)?;
    if let Some(rec) = scaling {
        let theta = rec.unscale_theta(&est.theta);
        let sigma = rec.unscale_sigma(&est.sigma);
        est = ApeEstimate::new(&est.method, est.n, theta, sigma, est.alpha, est.seed);
    }
    est.config_digest = digest;
    for (j, name) in ds.x_names.iter().enumerate() {
        println!(
            "{name}: {:.6} ({:.0}% CI {:.6} to {:.6}, se {:.6})",
            est.theta[j],
            100.0 * (1.0 - est.alpha),
            est.ci[j][0],
            est.ci[j][1],
            est.std_errors()[j]
        );
    }
    println!("covariance min eigenvalue: {:.6e}", est.min_eigenvalue());
    let json = est.to_json().map_err(run_err)?;
    match &a.out {
        Some(p) => write_output(p, &json)?,
        None => println!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(a: SimulateArgs, base: RunConfig) -> CmdResult<ExitCode> {
    let setting = parse_setting(&a.setting, a.n)?;
    let method: CoverageMethod = a.method.parse().map_err(usage)?;
    if a.repeats == 0 {
        return Err(usage(anyhow::anyhow!("--repeats must be at least 1")));
    }
    if method == CoverageMethod::Oracle && setting.noise().is_none() {
        return Err(usage(anyhow::anyhow!("the oracle method needs synthetic predictors")));
    }
    let cfg = apply_flags(base, &a.run)?;
    let mut report = run_coverage(&setting, method, a.repeats, cfg.seed, &cfg).map_err(run_err)?;
    report.config_digest = config_digest(&cfg)?;
    println!("{}", report.summary_line());
    if let Some(p) = &a.out {
        write_output(p, &report.to_csv().map_err(run_err)?)?;
    }
    if let Some(p) = &a.json {
        write_output(p, &report.to_json().map_err(run_err)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: VerifyArgs) -> CmdResult<ExitCode> {
    let suite: Suite = a.suite.parse().map_err(usage)?;
    let results = run_suite(suite);
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| r.failed()).map(|r| r.name.as_str()).collect();
    if let Some(p) = &a.out {
        write_output(p, &serde_json::to_string_pretty(&results).map_err(run_err)?)?;
    }
    println!("{} checks, {} failed", results.len(), failed.len());
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failed checks: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn cmd_tune(a: TuneArgs, base: RunConfig) -> CmdResult<ExitCode> {
    let setting = parse_setting(&a.setting, Some(a.n))?;
    let target: TuneTarget = a.target.parse().map_err(usage)?;
    if a.trials == 0 || a.datasets == 0 {
        return Err(usage(anyhow::anyhow!("--trials and --datasets must be at least 1")));
    }
    let report = tune_gbt(&setting, target, a.trials, a.datasets, a.n, a.seed).map_err(run_err)?;
    for t in &report.trials {
        let p = &t.params;
        println!(
            "rounds={:<4} learning_rate={:.4} max_depth={} min_leaf={:<3} mse={:.5}",
            p.rounds, p.learning_rate, p.max_depth, p.min_leaf, t.mse
        );
    }
    let b = &report.best;
    println!(
        "best: rounds={} learning_rate={:.4} max_depth={} min_leaf={}",
        b.rounds, b.learning_rate, b.max_depth, b.min_leaf
    );
    if let Some(p) = &a.out {
        let mut cfg = base;
        match target {
            TuneTarget::Outcome => cfg.outcome = RegressorSpec::Gbt(b.clone()),
            TuneTarget::Exposure => cfg.exposure = RegressorSpec::Gbt(b.clone()),
        }
        write_output(p, &cfg.to_toml().map_err(run_err)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_mse(a: MseArgs, base: RunConfig) -> CmdResult<ExitCode> {
    let setting = parse_setting(&a.setting, None)?;
    if setting.noise().is_none() {
        return Err(usage(anyhow::anyhow!("nuisance errors need synthetic predictors")));
    }
    if a.repeats == 0 {
        return Err(usage(anyhow::anyhow!("--repeats must be at least 1")));
    }
    let cfg = apply_flags(base, &a.run)?;
    let reports = run_mse(&setting, a.n_train, a.n_test, a.repeats, cfg.seed, &cfg).map_err(run_err)?;
    let summary = summarize_mse(&reports);
    println!("{:<12} {:<12} {:>10} {:>10}", "target", "method", "mse", "se");
    for s in &summary {
        println!("{:<12} {:<12} {:>10.4} {:>10.4}", s.target, s.method, s.mean, s.std_error);
    }
    if let Some(p) = &a.out {
        write_output(p, &mse_entries_csv(&reports).map_err(run_err)?)?;
    }
    if let Some(p) = &a.json {
        let doc = serde_json::json!({
            "setting": setting.label(),
            "seed": cfg.seed,
            "config_digest": config_digest(&cfg)?,
            "summary": summary,
            "repeats": reports,
        });
        write_output(p, &serde_json::to_string_pretty(&doc).map_err(run_err)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_plot(a: PlotArgs) -> CmdResult<ExitCode> {
    let text = fs::read_to_string(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))
        .map_err(usage)?;
    let report = CoverageReport::from_json(&text).map_err(usage)?;
    write_output(&a.out, &coverage_svg(&report))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_generate(a: GenerateArgs) -> CmdResult<ExitCode> {
    let setting = parse_setting(&a.setting, Some(a.n))?;
    let ds = gen_dataset(&setting, a.n, a.seed).map_err(run_err)?;
    let file = fs::File::create(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .map_err(run_err)?;
    write_csv(&ds, "y", file).map_err(run_err)?;
    Ok(ExitCode::SUCCESS)
}
