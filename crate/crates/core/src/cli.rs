//! Command-line front end.
//!
//! Every option can come from a JSON file (`--config`) or a flag; flags win.
//! Exit codes: 0 ok, 2 configuration or input error, 3 too many failed
//! replicates, 4 estimation failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataset::{load_csv, normalize, split, Column, Dataset, Schema, SplitSpec};
use crate::design::DesignId;
use crate::error::Error;
use crate::missingness::{independence_check, prepare_design, ImputationScheme};
use crate::policy::{optimize_rule, SearchSettings};
use crate::propensity::{BalanceFunction, FitMethod};
use crate::simulation::{
    run_scenario, summary_markdown, write_raw_csv, write_summary_csv, DesignVariant, RunOptions, Scenario, ScenarioSpec,
};
use crate::value::{bootstrap, AlphaCorrection, BetaConstraint, EstimateOptions, EstimatorKind, ValueEngine};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_REPLICATES: i32 = 3;
pub const EXIT_ESTIMATION: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::ReplicateFailures { .. } => EXIT_REPLICATES,
            Error::InvalidArgument(_)
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::UnknownColumn(_)
            | Error::NonNumeric { .. }
            | Error::MissingMandatory { .. }
            | Error::InvalidTreatment(_)
            | Error::NoPredictive => EXIT_CONFIG,
            _ => EXIT_ESTIMATION,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cbdr", version, about = "Doubly robust value estimation and search for linear treatment rules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte Carlo study on one synthetic scenario.
    Simulate(SimulateArgs),
    /// Split a dataset, search rules on the training half and estimate their value on the test half.
    Estimate(EstimateArgs),
    /// Search a rule on a whole dataset.
    Search(SearchArgs),
    /// Test whether treatment depends on the missingness pattern given the confounders.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args, Default)]
struct Common {
    /// JSON file with default values for any option.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Estimators: comma-separated list of udr, idr, cbdr, cbdrstar.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    /// Restrict estimators to one propensity fit: mle or cbps.
    #[arg(long)]
    ps_method: Option<String>,
    /// Balancing function: m1, m2 or full.
    #[arg(long)]
    balance: Option<String>,
    /// Constraint for the variance-minimizing outcome fit: unconstrained or sphere.
    #[arg(long)]
    beta_constraint: Option<String>,
    /// Influence of balancing propensity fits in the variance: moment or score.
    #[arg(long)]
    alpha_correction: Option<String>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    max_evals: Option<usize>,
    #[arg(long)]
    search_seed: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
struct InputArgs {
    /// Input CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    treatment: Option<String>,
    #[arg(long)]
    outcome: Option<String>,
    #[arg(long, value_delimiter = ',')]
    confounders: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    predictive: Option<Vec<String>>,
    /// Columns to standardize before analysis.
    #[arg(long, value_delimiter = ',')]
    normalize: Option<Vec<String>>,
    /// Imputation for predictive covariates: zero, median, linear or interact.
    #[arg(long)]
    impute: Option<String>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Scenario code: cc, ic, ci or ii.
    #[arg(long)]
    scenario: Option<String>,
    /// Missingness parameters, e.g. `1,1`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    omega: Option<Vec<f64>>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Designs: comma-separated list of x, xdagger_zero, xdagger_median, xdagger_linear, xdagger_interact.
    #[arg(long, value_delimiter = ',')]
    designs: Option<Vec<String>>,
    /// Evaluate with nuisance models fitted on the training split.
    #[arg(long)]
    carry_nuisances: bool,
    /// Also write raw_estimates.csv.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    oracle_draws: Option<usize>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: InputArgs,
    /// Design to report: x or xdagger (default both).
    #[arg(long)]
    design: Option<String>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Seed of the train/test split.
    #[arg(long)]
    split_seed: Option<u64>,
    /// Bootstrap replications (0 disables).
    #[arg(long)]
    bootstrap: Option<usize>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: InputArgs,
    /// Estimator used as the search objective.
    #[arg(long)]
    kind: Option<String>,
    /// x or xdagger.
    #[arg(long)]
    design: Option<String>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: InputArgs,
}

/// Contents of a `--config` file. Unknown keys are rejected.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub scenario: Option<String>,
    pub omega: Option<Vec<f64>>,
    pub reps: Option<usize>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub seed: Option<u64>,
    pub estimators: Option<Vec<String>>,
    pub designs: Option<Vec<String>>,
    pub kind: Option<String>,
    #[serde(rename = "ps.method")]
    pub ps_method: Option<String>,
    #[serde(rename = "ps.balance")]
    pub ps_balance: Option<String>,
    #[serde(rename = "om.design")]
    pub om_design: Option<String>,
    #[serde(rename = "om.constraint")]
    pub om_constraint: Option<String>,
    #[serde(rename = "om.correction")]
    pub om_correction: Option<String>,
    pub impute: Option<String>,
    #[serde(rename = "search.restarts")]
    pub search_restarts: Option<usize>,
    #[serde(rename = "search.population")]
    pub search_population: Option<usize>,
    #[serde(rename = "search.max_evals")]
    pub search_max_evals: Option<usize>,
    #[serde(rename = "search.seed")]
    pub search_seed: Option<u64>,
    pub bootstrap: Option<usize>,
    pub input: Option<PathBuf>,
    pub treatment: Option<String>,
    pub outcome: Option<String>,
    pub confounders: Option<Vec<String>>,
    pub predictive: Option<Vec<String>>,
    pub normalize: Option<Vec<String>>,
    pub train_fraction: Option<f64>,
    pub split_seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub carry_nuisances: Option<bool>,
    pub raw: Option<bool>,
    pub oracle_draws: Option<usize>,
}

fn load_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))
}

fn parse<T: std::str::FromStr<Err = String>>(value: Option<&str>) -> CliResult<Option<T>> {
    value.map(|v| v.parse::<T>().map_err(CliError::config)).transpose()
}

/// Options shared by every subcommand after merging file and flags.
struct Resolved {
    kinds: Vec<EstimatorKind>,
    estimate: EstimateOptions,
    search: SearchSettings,
    seed: u64,
    out: PathBuf,
}

fn resolve_common(c: &Common, f: &FileConfig) -> CliResult<Resolved> {
    let method = parse_method(c.ps_method.as_deref().or(f.ps_method.as_deref()))?;
    let listed = c.estimators.clone().or_else(|| f.estimators.clone());
    let mut kinds = match listed {
        Some(list) => list.iter().map(|s| s.parse::<EstimatorKind>().map_err(CliError::config)).collect::<CliResult<Vec<_>>>()?,
        None => EstimatorKind::ALL.to_vec(),
    };
    if let Some(m) = method {
        kinds.retain(|k| k.propensity_method() == m);
        if kinds.is_empty() {
            return Err(CliError::config("no listed estimator uses the requested ps.method"));
        }
    }
    let mut estimate = EstimateOptions::default();
    if let Some(b) = parse::<BalanceFunction>(c.balance.as_deref().or(f.ps_balance.as_deref()))? {
        estimate.balance = b;
    }
    if let Some(s) = c.beta_constraint.as_deref().or(f.om_constraint.as_deref()) {
        estimate.constraint = match s.to_ascii_lowercase().as_str() {
            "unconstrained" => BetaConstraint::Unconstrained,
            "sphere" => BetaConstraint::Sphere,
            other => return Err(CliError::config(format!("unknown beta constraint `{other}`"))),
        };
    }
    if let Some(corr) = parse::<AlphaCorrection>(c.alpha_correction.as_deref().or(f.om_correction.as_deref()))? {
        estimate.correction = corr;
    }
    let seed = c.seed.or(f.seed).unwrap_or(0);
    estimate.seed = seed;
    let defaults = SearchSettings::default();
    let search = SearchSettings {
        restarts: c.restarts.or(f.search_restarts).unwrap_or(defaults.restarts),
        population: c.population.or(f.search_population).unwrap_or(defaults.population),
        max_evals: c.max_evals.or(f.search_max_evals).unwrap_or(defaults.max_evals),
        seed: c.search_seed.or(f.search_seed).unwrap_or(seed),
    };
    search.validate()?;
    let out = c.out.clone().or_else(|| f.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    Ok(Resolved { kinds, estimate, search, seed, out })
}

fn parse_method(s: Option<&str>) -> CliResult<Option<FitMethod>> {
    s.map(|v| match v.to_ascii_lowercase().as_str() {
        "mle" => Ok(FitMethod::Mle),
        "cbps" => Ok(FitMethod::Cbps),
        other => Err(CliError::config(format!("unknown ps.method `{other}` (expected mle or cbps)"))),
    })
    .transpose()
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::from(Error::Io { path: dir.to_path_buf(), source }))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|source| CliError::from(Error::Io { path: path.to_path_buf(), source }))
}

struct LoadedInput {
    ds: Dataset,
    scheme: ImputationScheme,
}

fn load_input(i: &InputArgs, f: &FileConfig) -> CliResult<LoadedInput> {
    let path = i.input.clone().or_else(|| f.input.clone()).ok_or_else(|| CliError::config("missing --input"))?;
    let treatment = i.treatment.clone().or_else(|| f.treatment.clone()).ok_or_else(|| CliError::config("missing --treatment"))?;
    let outcome = i.outcome.clone().or_else(|| f.outcome.clone()).ok_or_else(|| CliError::config("missing --outcome"))?;
    let confounders =
        i.confounders.clone().or_else(|| f.confounders.clone()).ok_or_else(|| CliError::config("missing --confounders"))?;
    let predictive = i.predictive.clone().or_else(|| f.predictive.clone()).unwrap_or_default();
    let schema = Schema { treatment, outcome, confounders, predictive };
    let mut ds = load_csv(&path, &schema)?;
    if let Some(cols) = i.normalize.clone().or_else(|| f.normalize.clone()) {
        let mut columns = Vec::with_capacity(cols.len());
        for name in &cols {
            if let Some(j) = schema.confounders.iter().position(|c| c == name) {
                columns.push(Column::Confounder(j));
            } else if let Some(j) = schema.predictive.iter().position(|c| c == name) {
                columns.push(Column::Predictive(j));
            } else {
                return Err(CliError::config(format!("cannot normalize unknown column `{name}`")));
            }
        }
        ds = normalize(&ds, &columns)?;
    }
    let scheme = parse::<ImputationScheme>(i.impute.as_deref().or(f.impute.as_deref()))?.unwrap_or(ImputationScheme::Median);
    Ok(LoadedInput { ds, scheme })
}

fn designs_for(ds: &Dataset, choice: Option<&str>) -> CliResult<Vec<DesignId>> {
    match parse::<DesignId>(choice)? {
        Some(DesignId::XDagger) if ds.q() == 0 => Err(CliError::config("design xdagger needs predictive columns")),
        Some(d) => Ok(vec![d]),
        None if ds.q() == 0 => Ok(vec![DesignId::X]),
        None => Ok(vec![DesignId::X, DesignId::XDagger]),
    }
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let f = load_config(a.common.config.as_deref())?;
    let r = resolve_common(&a.common, &f)?;
    let scenario: Scenario = parse(a.scenario.as_deref().or(f.scenario.as_deref()))?
        .ok_or_else(|| CliError::config("missing --scenario"))?;
    let omega = a.omega.clone().or_else(|| f.omega.clone()).unwrap_or_else(|| vec![1.0, 1.0]);
    if omega.len() != 2 {
        return Err(CliError::config("--omega takes two values"));
    }
    let mut spec = ScenarioSpec::new(scenario, (omega[0], omega[1]));
    spec.reps = a.reps.or(f.reps).unwrap_or(spec.reps);
    spec.n_train = a.n_train.or(f.n_train).unwrap_or(spec.n_train);
    spec.n_test = a.n_test.or(f.n_test).unwrap_or(spec.n_test);
    spec.seed = r.seed;
    spec.validate()?;
    let designs = match a.designs.clone().or_else(|| f.designs.clone()) {
        Some(list) => list.iter().map(|s| s.parse::<DesignVariant>().map_err(CliError::config)).collect::<CliResult<Vec<_>>>()?,
        None => DesignVariant::ALL.to_vec(),
    };
    let options = RunOptions {
        estimate: r.estimate,
        search: r.search,
        carry_nuisances: a.carry_nuisances || f.carry_nuisances.unwrap_or(false),
        oracle_draws: a.oracle_draws.or(f.oracle_draws).unwrap_or(1_000_000),
    };
    let result = run_scenario(&spec, &r.kinds, &designs, &options)?;
    ensure_dir(&r.out)?;
    write_summary_csv(&r.out.join("summary.csv"), &result.rows)?;
    write_text(&r.out.join("summary.md"), &summary_markdown(&result, &spec))?;
    if a.raw || f.raw.unwrap_or(false) {
        write_raw_csv(&r.out.join("raw_estimates.csv"), &result.raw)?;
    }
    println!(
        "scenario {}: {} rows, truth {:.4}, missing rate {:.3}, failed replicates {}",
        scenario.label(),
        result.rows.len(),
        result.truth.value,
        result.missing_rate,
        result.failures
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportRow {
    estimator: String,
    design: String,
    point_estimate: f64,
    variance: f64,
    ci_low: f64,
    ci_high: f64,
    bootstrap_variance: Option<f64>,
    bootstrap_ci_low: Option<f64>,
    bootstrap_ci_high: Option<f64>,
    percentile_ci_low: Option<f64>,
    percentile_ci_high: Option<f64>,
    train_value: f64,
    n_test: usize,
}

fn write_with_header<T: Serialize>(path: &Path, header: &str, rows: &[T]) -> CliResult<()> {
    let io = |source| CliError::from(Error::Io { path: path.to_path_buf(), source });
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(header.as_bytes()).map_err(io)?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row).map_err(Error::from)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

fn cmd_estimate(a: &EstimateArgs) -> CliResult<()> {
    let f = load_config(a.common.config.as_deref())?;
    let r = resolve_common(&a.common, &f)?;
    let input = load_input(&a.input, &f)?;
    let designs = designs_for(&input.ds, a.design.as_deref().or(f.om_design.as_deref()))?;
    let split_spec = SplitSpec {
        train_fraction: a.train_fraction.or(f.train_fraction).unwrap_or(0.5),
        seed: a.split_seed.or(f.split_seed).unwrap_or(r.seed),
    };
    let b = a.bootstrap.or(f.bootstrap).unwrap_or(0);
    let (train, test) = split(&input.ds, &split_spec)?;
    let mean_y = input.ds.mean_outcome();
    println!("sample mean of outcome: {mean_y:.2}");

    let mut rows = Vec::new();
    for &design_id in &designs {
        let test_design = prepare_design(&test, design_id, input.scheme)?;
        let engine = ValueEngine::new(&test_design, r.estimate)?;
        for &kind in &r.kinds {
            let found = optimize_rule(&train, kind, design_id, input.scheme, &r.estimate, &r.search)?;
            let d = found.rule.assign_all(test.x())?;
            let est = engine.evaluate(kind, &d, true)?;
            let (lo, hi) = est.ci();
            let boot = if b > 0 {
                Some(bootstrap(kind, &test, &found.rule, design_id, input.scheme, b, r.seed, &r.estimate, est.value)?)
            } else {
                None
            };
            rows.push(ReportRow {
                estimator: kind.label().into(),
                design: design_id.label().into(),
                point_estimate: est.value,
                variance: est.variance(),
                ci_low: lo,
                ci_high: hi,
                bootstrap_variance: boot.map(|b| b.variance),
                bootstrap_ci_low: boot.map(|b| b.ci_low),
                bootstrap_ci_high: boot.map(|b| b.ci_high),
                percentile_ci_low: boot.map(|b| b.percentile_low),
                percentile_ci_high: boot.map(|b| b.percentile_high),
                train_value: found.value,
                n_test: est.n,
            });
        }
    }
    ensure_dir(&r.out)?;
    let header = format!("# sample_mean_y={mean_y:.2}\n# sample_mean_y_full={mean_y}\n");
    write_with_header(&r.out.join("value_report.csv"), &header, &rows)?;
    for row in &rows {
        println!(
            "{:<6} {:<8} value {:>10.4}  variance {:>10.4}  CI [{:.4}, {:.4}]",
            row.estimator, row.design, row.point_estimate, row.variance, row.ci_low, row.ci_high
        );
    }
    Ok(())
}

fn cmd_search(a: &SearchArgs) -> CliResult<()> {
    let f = load_config(a.common.config.as_deref())?;
    let r = resolve_common(&a.common, &f)?;
    let input = load_input(&a.input, &f)?;
    let kind = match a.kind.as_deref().or(f.kind.as_deref()) {
        Some(k) => k.parse::<EstimatorKind>().map_err(CliError::config)?,
        None => EstimatorKind::Cbdr,
    };
    let design_id = parse::<DesignId>(a.design.as_deref().or(f.om_design.as_deref()))?.unwrap_or(DesignId::X);
    if design_id == DesignId::XDagger && input.ds.q() == 0 {
        return Err(CliError::config("design xdagger needs predictive columns"));
    }
    let found = optimize_rule(&input.ds, kind, design_id, input.scheme, &r.estimate, &r.search)?;
    ensure_dir(&r.out)?;
    let mut header = vec!["estimator".to_string(), "design".into(), "train_value".into(), "eta_intercept".into()];
    header.extend(input.ds.names().confounders.iter().map(|c| format!("eta_{c}")));
    let mut record = vec![kind.label().to_string(), design_id.label().into(), format!("{}", found.value)];
    record.extend(found.rule.eta().iter().map(|v| format!("{v}")));
    let path = r.out.join("rule.csv");
    let mut w = csv::Writer::from_path(&path).map_err(Error::from)?;
    w.write_record(&header).map_err(Error::from)?;
    w.write_record(&record).map_err(Error::from)?;
    w.flush().map_err(|source| CliError::from(Error::Io { path: path.clone(), source }))?;
    println!("{} on {}: training value {:.4}", kind.label(), design_id.label(), found.value);
    Ok(())
}

fn cmd_diagnose(a: &DiagnoseArgs) -> CliResult<()> {
    let f = load_config(a.common.config.as_deref())?;
    let r = resolve_common(&a.common, &f)?;
    let input = load_input(&a.input, &f)?;
    let report = independence_check(&input.ds)?;
    ensure_dir(&r.out)?;
    let mut tests = report.columns.clone();
    tests.extend(report.joint.clone());
    write_with_header(&r.out.join("diagnose.csv"), "", &tests)?;
    if let Some(note) = &report.note {
        println!("{note}");
    }
    for t in &tests {
        println!("{:<12} LR {:>10.4}  dof {}  p {:.4}", t.name, t.statistic, t.dof, t.p_value);
    }
    Ok(())
}

fn configure_threads() {
    if let Some(n) = std::env::var("CBDR_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parses `args` (including the program name) and runs the subcommand;
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    configure_threads();
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Search(a) => cmd_search(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
