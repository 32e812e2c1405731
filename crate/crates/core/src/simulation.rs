//! Synthetic data generators, the truth oracle and the Monte Carlo runner.
//!
//! Covariates: `X₁, W₁ ~ U[−1, 1]`, `X₂, W₂ ~ U[−2, 2]`, all independent.
//! Masks: `pr(R_j = 1 | W) = expit(1 + ω_j |W_j|)`.
//! Treatment: `expit(0.5X₁ − 0.5X₂)` (linear) or `expit(−0.5 + |X₁X₂|)`.
//! Outcome, with `c(X) = 1 − 2X₁ + X₂`:
//!
//! ```text
//! linear:    10 (4X₁ − X₂ + 3W₁ − 2W₂ + A c(X)) + ε
//! nonlinear: 10 (4X₁² − W₂² + W₁X₂ + 5W₂X₁ + A c(X) |X₂|) + ε
//! ```

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Predictive};
use crate::design::DesignId;
use crate::error::{Error, Result};
use crate::linalg::{expit, mean, sample_sd};
use crate::missingness::{prepare_design, ImputationScheme};
use crate::policy::{optimize_rule, SearchSettings};
use crate::seeding::{derive_seed, rng_for};
use crate::value::{EstimateOptions, EstimatorKind, ValueEngine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Lin,
    Nonlin,
}

/// Scenario code: first letter propensity, second outcome; `C` correct
/// (linear), `I` incorrect (nonlinear).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    CC,
    IC,
    CI,
    II,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::CC, Scenario::IC, Scenario::CI, Scenario::II];

    pub fn truths(self) -> (Truth, Truth) {
        match self {
            Scenario::CC => (Truth::Lin, Truth::Lin),
            Scenario::IC => (Truth::Nonlin, Truth::Lin),
            Scenario::CI => (Truth::Lin, Truth::Nonlin),
            Scenario::II => (Truth::Nonlin, Truth::Nonlin),
        }
    }

    pub fn from_truths(ps: Truth, outcome: Truth) -> Self {
        match (ps, outcome) {
            (Truth::Lin, Truth::Lin) => Scenario::CC,
            (Truth::Nonlin, Truth::Lin) => Scenario::IC,
            (Truth::Lin, Truth::Nonlin) => Scenario::CI,
            (Truth::Nonlin, Truth::Nonlin) => Scenario::II,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scenario::CC => "CC",
            Scenario::IC => "IC",
            Scenario::CI => "CI",
            Scenario::II => "II",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cc" => Ok(Scenario::CC),
            "ic" => Ok(Scenario::IC),
            "ci" => Ok(Scenario::CI),
            "ii" => Ok(Scenario::II),
            other => Err(format!("unknown scenario `{other}` (expected cc, ic, ci or ii)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioSpec {
    pub ps_truth: Truth,
    pub outcome_truth: Truth,
    pub omega: (f64, f64),
    pub n_train: usize,
    pub n_test: usize,
    pub reps: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario, omega: (f64, f64)) -> Self {
        let (ps_truth, outcome_truth) = scenario.truths();
        Self { ps_truth, outcome_truth, omega, n_train: 1000, n_test: 1000, reps: 500, seed: 0 }
    }

    pub fn scenario(&self) -> Scenario {
        Scenario::from_truths(self.ps_truth, self.outcome_truth)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train < 10 || self.n_test < 10 || self.reps == 0 {
            return Err(Error::InvalidArgument("scenario needs n_train, n_test ≥ 10 and reps ≥ 1".into()));
        }
        if !(self.omega.0.is_finite() && self.omega.1.is_finite()) {
            return Err(Error::InvalidArgument("omega must be finite".into()));
        }
        Ok(())
    }
}

/// `(X, W)`, each n × 2.
pub fn gen_covariates<R: Rng>(n: usize, rng: &mut R) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut x = DMatrix::zeros(n, 2);
    let mut w = DMatrix::zeros(n, 2);
    for i in 0..n {
        x[(i, 0)] = rng.random_range(-1.0..=1.0);
        x[(i, 1)] = rng.random_range(-2.0..=2.0);
        w[(i, 0)] = rng.random_range(-1.0..=1.0);
        w[(i, 1)] = rng.random_range(-2.0..=2.0);
    }
    (x, w)
}

pub fn observation_prob(w: f64, omega: f64) -> f64 {
    expit(1.0 + omega * w.abs())
}

/// Mask matrix; column `j` uses `omega[j]`.
pub fn gen_missingness<R: Rng>(w: &DMatrix<f64>, omega: &[f64], rng: &mut R) -> Result<DMatrix<f64>> {
    if omega.len() != w.ncols() {
        return Err(Error::DimensionMismatch { what: "omega", expected: w.ncols(), got: omega.len() });
    }
    let mut r = DMatrix::zeros(w.nrows(), w.ncols());
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            r[(i, j)] = if rng.random::<f64>() < observation_prob(w[(i, j)], omega[j]) { 1.0 } else { 0.0 };
        }
    }
    Ok(r)
}

pub fn treatment_prob(x1: f64, x2: f64, truth: Truth) -> f64 {
    match truth {
        Truth::Lin => expit(0.5 * x1 - 0.5 * x2),
        Truth::Nonlin => expit(-0.5 + (x1 * x2).abs()),
    }
}

pub fn gen_treatment<R: Rng>(x: &DMatrix<f64>, truth: Truth, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(x.nrows(), |i, _| {
        if rng.random::<f64>() < treatment_prob(x[(i, 0)], x[(i, 1)], truth) {
            1.0
        } else {
            -1.0
        }
    })
}

/// Noiseless outcome mean.
pub fn outcome_mean(x: [f64; 2], w: [f64; 2], a: f64, truth: Truth) -> f64 {
    let [x1, x2] = x;
    let [w1, w2] = w;
    let c = 1.0 - 2.0 * x1 + x2;
    match truth {
        Truth::Lin => 10.0 * (4.0 * x1 - x2 + 3.0 * w1 - 2.0 * w2 + a * c),
        Truth::Nonlin => 10.0 * (4.0 * x1 * x1 - w2 * w2 + w1 * x2 + 5.0 * w2 * x1 + a * c * x2.abs()),
    }
}

pub fn gen_outcome<R: Rng>(x: &DMatrix<f64>, w: &DMatrix<f64>, a: &DVector<f64>, truth: Truth, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(x.nrows(), |i, _| {
        outcome_mean([x[(i, 0)], x[(i, 1)]], [w[(i, 0)], w[(i, 1)]], a[i], truth) + rng.sample::<f64, _>(StandardNormal)
    })
}

/// One simulated dataset; `W` is masked by `R`.
pub fn generate<R: Rng>(n: usize, ps: Truth, outcome: Truth, omega: (f64, f64), rng: &mut R) -> Result<Dataset> {
    let (x, w) = gen_covariates(n, rng);
    let r = gen_missingness(&w, &[omega.0, omega.1], rng)?;
    let a = gen_treatment(&x, ps, rng);
    let y = gen_outcome(&x, &w, &a, outcome, rng);
    Dataset::new(x, a, y, Some(Predictive { w, r }))
}

/// The optimal rule for both outcome models: treat when `1 − 2X₁ + X₂ ≥ 0`.
pub fn optimal_assignment(x1: f64, x2: f64) -> f64 {
    if 1.0 - 2.0 * x1 + x2 >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleTruth {
    pub value: f64,
    pub se: f64,
}

/// `E[Y | X, A = d(X)]` with `W` integrated out analytically.
fn conditional_value(x1: f64, x2: f64, truth: Truth) -> f64 {
    let c = 1.0 - 2.0 * x1 + x2;
    let d = optimal_assignment(x1, x2);
    match truth {
        Truth::Lin => 10.0 * (4.0 * x1 - x2 + d * c),
        // E W₂² = 4/3 for W₂ ~ U[−2, 2]; the cross terms have mean zero
        Truth::Nonlin => 10.0 * (4.0 * x1 * x1 - 4.0 / 3.0 + d * c * x2.abs()),
    }
}

/// Monte Carlo value of the optimal rule from `mc_n` draws of `X`, taken
/// as antithetic pairs `(X, −X)`.
pub fn oracle_truth(truth: Truth, mc_n: usize, seed: u64) -> Result<OracleTruth> {
    if mc_n < 2 {
        return Err(Error::InvalidArgument("oracle needs at least two draws".into()));
    }
    let pairs = mc_n / 2;
    let chunks = 64usize;
    let per = pairs.div_ceil(chunks);
    let sums: Vec<(f64, f64, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_for(seed, c as u64);
            let count = per.min(pairs.saturating_sub(c * per));
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let x1: f64 = rng.random_range(-1.0..=1.0);
                let x2: f64 = rng.random_range(-2.0..=2.0);
                let v = 0.5 * (conditional_value(x1, x2, truth) + conditional_value(-x1, -x2, truth));
                s += v;
                s2 += v * v;
            }
            (s, s2, count)
        })
        .collect();
    let (s, s2, m) = sums.iter().fold((0.0, 0.0, 0usize), |acc, t| (acc.0 + t.0, acc.1 + t.1, acc.2 + t.2));
    let mf = m as f64;
    let value = s / mf;
    let var = (s2 / mf - value * value).max(0.0) * mf / (mf - 1.0);
    Ok(OracleTruth { value, se: (var / mf).sqrt() })
}

/// Adjustment set plus, for the augmented design, its imputation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DesignVariant {
    X,
    XDagger(ImputationScheme),
}

impl DesignVariant {
    pub const ALL: [DesignVariant; 5] = [
        DesignVariant::X,
        DesignVariant::XDagger(ImputationScheme::Zero),
        DesignVariant::XDagger(ImputationScheme::Median),
        DesignVariant::XDagger(ImputationScheme::LinearModel),
        DesignVariant::XDagger(ImputationScheme::InteractionModel),
    ];

    pub fn id(self) -> DesignId {
        match self {
            DesignVariant::X => DesignId::X,
            DesignVariant::XDagger(_) => DesignId::XDagger,
        }
    }

    pub fn scheme(self) -> ImputationScheme {
        match self {
            DesignVariant::X => ImputationScheme::Zero,
            DesignVariant::XDagger(s) => s,
        }
    }

    /// Plain-text label used in CSV output.
    pub fn label(self) -> String {
        match self {
            DesignVariant::X => "x".into(),
            DesignVariant::XDagger(s) => format!("xdagger_{}", s.label()),
        }
    }

    /// Label used in markdown tables.
    pub fn display(self) -> String {
        match self {
            DesignVariant::X => "X".into(),
            DesignVariant::XDagger(ImputationScheme::Zero) => "X†₀".into(),
            DesignVariant::XDagger(s) => format!("X†({})", s.label()),
        }
    }
}

impl std::str::FromStr for DesignVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.to_ascii_lowercase();
        if s == "x" {
            return Ok(DesignVariant::X);
        }
        let scheme = s
            .strip_prefix("xdagger_")
            .or_else(|| s.strip_prefix("xdagger-"))
            .or_else(|| s.strip_prefix("xdag_"))
            .ok_or_else(|| format!("unknown design `{s}` (expected x or xdagger_<imputation>)"))?;
        Ok(DesignVariant::XDagger(scheme.parse()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub estimate: EstimateOptions,
    pub search: SearchSettings,
    /// Evaluate on test data with nuisance models fitted on the training
    /// split instead of refitting on the test split.
    pub carry_nuisances: bool,
    /// Draws for the truth oracle.
    pub oracle_draws: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            estimate: EstimateOptions::default(),
            search: SearchSettings::default(),
            carry_nuisances: false,
            oracle_draws: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub estimator: String,
    pub design: String,
    pub reps: usize,
    pub truth: f64,
    pub mean_value: f64,
    pub bias: f64,
    pub se: f64,
    pub rmse: f64,
    pub mean_sigma_hat: f64,
    /// Monte Carlo standard error of `mean_sigma_hat`.
    pub sigma_hat_mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RawEstimate {
    pub rep: usize,
    pub estimator: String,
    pub design: String,
    pub value: f64,
    pub sigma_hat: f64,
    pub train_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub truth: OracleTruth,
    pub rows: Vec<SummaryRow>,
    pub raw: Vec<RawEstimate>,
    pub failures: usize,
    /// Mean share of missing predictive entries over all generated sets.
    pub missing_rate: f64,
}

impl ScenarioResult {
    pub fn row(&self, kind: EstimatorKind, design: DesignVariant) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.estimator == kind.label() && r.design == design.label())
    }
}

struct Cell {
    value: f64,
    sigma_hat: f64,
    train_value: f64,
}

fn run_cell(
    train: &crate::dataset::Dataset,
    test: &crate::dataset::Dataset,
    kind: EstimatorKind,
    design: DesignVariant,
    options: &RunOptions,
    search_seed: u64,
) -> Result<Cell> {
    let search = SearchSettings { seed: search_seed, ..options.search };
    let found = optimize_rule(train, kind, design.id(), design.scheme(), &options.estimate, &search)?;
    let test_design = prepare_design(test, design.id(), design.scheme())?;
    let d_test = found.rule.assign_all(test.x())?;
    let engine = ValueEngine::new(&test_design, options.estimate)?;
    let est = if options.carry_nuisances {
        let train_design = prepare_design(train, design.id(), design.scheme())?;
        let train_engine = ValueEngine::new(&train_design, options.estimate)?;
        let d_train = found.rule.assign_all(train.x())?;
        let (ps, om, ok) = train_engine.fit_nuisances(kind, &d_train)?;
        engine.evaluate_with(kind, &d_test, &ps, &om, true, ok)?
    } else {
        engine.evaluate(kind, &d_test, true)?
    };
    Ok(Cell { value: est.value, sigma_hat: est.sigma_hat, train_value: found.value })
}

/// Monte Carlo study: per replicate, independent train and test sets; a rule
/// is searched on train for every (estimator, design) and its value
/// estimated on test. Replicates with any failing cell are dropped; more
/// than 2% dropped aborts.
pub fn run_scenario(
    spec: &ScenarioSpec,
    kinds: &[EstimatorKind],
    designs: &[DesignVariant],
    options: &RunOptions,
) -> Result<ScenarioResult> {
    spec.validate()?;
    options.search.validate()?;
    if kinds.is_empty() || designs.is_empty() {
        return Err(Error::InvalidArgument("need at least one estimator and one design".into()));
    }
    let truth = oracle_truth(spec.outcome_truth, options.oracle_draws, derive_seed(spec.seed, u64::MAX))?;
    let cells: Vec<(EstimatorKind, DesignVariant)> =
        designs.iter().flat_map(|&dv| kinds.iter().map(move |&k| (k, dv))).collect();

    let reps: Vec<Option<(Vec<Cell>, f64)>> = (0..spec.reps)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = derive_seed(spec.seed, rep as u64);
            let train = generate(spec.n_train, spec.ps_truth, spec.outcome_truth, spec.omega, &mut rng_for(rep_seed, 0)).ok()?;
            let test = generate(spec.n_test, spec.ps_truth, spec.outcome_truth, spec.omega, &mut rng_for(rep_seed, 1)).ok()?;
            let missing = (train.missing_rate() * train.n() as f64 + test.missing_rate() * test.n() as f64)
                / (train.n() + test.n()) as f64;
            let out: Option<Vec<Cell>> = cells
                .iter()
                .enumerate()
                .map(|(c, &(kind, dv))| run_cell(&train, &test, kind, dv, options, derive_seed(rep_seed, 2 + c as u64)).ok())
                .collect();
            out.map(|v| (v, missing))
        })
        .collect();

    let failures = reps.iter().filter(|r| r.is_none()).count();
    if failures as f64 > 0.02 * spec.reps as f64 {
        return Err(Error::ReplicateFailures { failed: failures, total: spec.reps });
    }
    let ok: Vec<(usize, &(Vec<Cell>, f64))> = reps.iter().enumerate().filter_map(|(i, r)| r.as_ref().map(|v| (i, v))).collect();
    let missing_rate = mean(&ok.iter().map(|(_, (_, m))| *m).collect::<Vec<_>>());
    let scenario = spec.scenario();

    let mut rows = Vec::with_capacity(cells.len());
    let mut raw = Vec::with_capacity(cells.len() * ok.len());
    for (c, &(kind, dv)) in cells.iter().enumerate() {
        let values: Vec<f64> = ok.iter().map(|(_, (v, _))| v[c].value).collect();
        let sigmas: Vec<f64> = ok.iter().map(|(_, (v, _))| v[c].sigma_hat).collect();
        rows.push(summarize(scenario, kind, dv, truth.value, &values, &sigmas));
        for (rep, (v, _)) in &ok {
            raw.push(RawEstimate {
                rep: *rep,
                estimator: kind.label().into(),
                design: dv.label(),
                value: v[c].value,
                sigma_hat: v[c].sigma_hat,
                train_value: v[c].train_value,
            });
        }
    }
    Ok(ScenarioResult { scenario, truth, rows, raw, failures, missing_rate })
}

/// Bias, sample SE and RMSE of `values` around `truth`.
pub fn summarize(
    scenario: Scenario,
    kind: EstimatorKind,
    design: DesignVariant,
    truth: f64,
    values: &[f64],
    sigmas: &[f64],
) -> SummaryRow {
    let m = values.len() as f64;
    let mean_value = mean(values);
    let mse = values.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / m;
    SummaryRow {
        scenario: scenario.label().into(),
        estimator: kind.label().into(),
        design: design.label(),
        reps: values.len(),
        truth,
        mean_value,
        bias: mean_value - truth,
        se: sample_sd(values),
        rmse: mse.sqrt(),
        mean_sigma_hat: mean(sigmas),
        sigma_hat_mc_se: sample_sd(sigmas) / m.sqrt(),
    }
}

fn write_records<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let io = |source| Error::Io { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(err) => io(err),
        other => Error::InvalidData(format!("{other:?}")),
    })?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_records(path, rows)
}

pub fn write_raw_csv(path: &Path, raw: &[RawEstimate]) -> Result<()> {
    write_records(path, raw)
}

/// Markdown table of bias, SE and RMSE, scaled by 100.
pub fn summary_markdown(result: &ScenarioResult, spec: &ScenarioSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "## Scenario {} (omega = ({}, {}), n_train = {}, n_test = {}, reps = {})\n",
        result.scenario.label(),
        spec.omega.0,
        spec.omega.1,
        spec.n_train,
        spec.n_test,
        spec.reps - result.failures
    );
    let _ = writeln!(
        s,
        "Bias, SE and RMSE are multiplied by 100. Truth = {:.4}; mean missing rate = {:.3}; failed replicates = {}.\n",
        result.truth.value, result.missing_rate, result.failures
    );
    let _ = writeln!(s, "| Estimator | Design | Bias | SE | RMSE |");
    let _ = writeln!(s, "|---|---|---:|---:|---:|");
    for row in &result.rows {
        let display = row.design.parse::<DesignVariant>().map(|d| d.display()).unwrap_or_else(|_| row.design.clone());
        let _ = writeln!(
            s,
            "| {} | {} | {:.0} | {:.0} | {:.0} |",
            row.estimator,
            display,
            100.0 * row.bias,
            100.0 * row.se,
            100.0 * row.rmse
        );
    }
    s
}
