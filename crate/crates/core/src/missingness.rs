//! Imputation of partially observed predictive covariates and the
//! likelihood-ratio check that treatment is independent of the missingness
//! pattern given the confounders.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dataset::{augment, Dataset};
use crate::design::{Design, DesignId};
use crate::error::{Error, Result};
use crate::linalg::quantile;
use crate::propensity::{fit_mle, log_likelihood, GmmSettings};

/// How `W̃ = R W + (1 − R) f(X)` fills the unobserved entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImputationScheme {
    Zero,
    Median,
    /// Least squares on `(1, X)` fitted to the observed rows.
    #[serde(rename = "linear")]
    LinearModel,
    /// Least squares on `(1, X, X_j X_k for j < k)`.
    #[serde(rename = "interact")]
    InteractionModel,
}

impl ImputationScheme {
    pub const ALL: [ImputationScheme; 4] = [
        ImputationScheme::Zero,
        ImputationScheme::Median,
        ImputationScheme::LinearModel,
        ImputationScheme::InteractionModel,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ImputationScheme::Zero => "zero",
            ImputationScheme::Median => "median",
            ImputationScheme::LinearModel => "linear",
            ImputationScheme::InteractionModel => "interact",
        }
    }
}

impl std::fmt::Display for ImputationScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for ImputationScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "zero" => Ok(ImputationScheme::Zero),
            "median" => Ok(ImputationScheme::Median),
            "linear" => Ok(ImputationScheme::LinearModel),
            "interact" | "interaction" => Ok(ImputationScheme::InteractionModel),
            other => Err(format!("unknown imputation `{other}` (expected zero, median, linear or interact)")),
        }
    }
}

fn imputation_basis(x: &DMatrix<f64>, interactions: bool) -> DMatrix<f64> {
    let n = x.nrows();
    let p = x.ncols();
    let pairs: Vec<(usize, usize)> =
        if interactions { (0..p).flat_map(|j| (j + 1..p).map(move |k| (j, k))).collect() } else { Vec::new() };
    let mut m = DMatrix::from_element(n, 1 + p + pairs.len(), 1.0);
    m.columns_mut(1, p).copy_from(x);
    for (c, &(j, k)) in pairs.iter().enumerate() {
        for i in 0..n {
            m[(i, 1 + p + c)] = x[(i, j)] * x[(i, k)];
        }
    }
    m
}

/// Imputed predictive covariates; observed entries are copied unchanged.
/// Only `X`, `W` and `R` are read.
pub fn impute(ds: &Dataset, scheme: ImputationScheme) -> Result<DMatrix<f64>> {
    let pred = ds.predictive().ok_or(Error::NoPredictive)?;
    let (n, q) = pred.w.shape();
    let basis = match scheme {
        ImputationScheme::LinearModel => Some(imputation_basis(ds.x(), false)),
        ImputationScheme::InteractionModel => Some(imputation_basis(ds.x(), true)),
        _ => None,
    };
    let mut out = DMatrix::zeros(n, q);
    for j in 0..q {
        let observed: Vec<usize> = (0..n).filter(|&i| pred.r[(i, j)] == 1.0).collect();
        let name = &ds.names().predictive[j];
        let fill: Box<dyn Fn(usize) -> f64> = match scheme {
            ImputationScheme::Zero => Box::new(|_| 0.0),
            ImputationScheme::Median => {
                let mut vals: Vec<f64> = observed.iter().map(|&i| pred.w[(i, j)]).collect();
                vals.sort_by(f64::total_cmp);
                let med = quantile(&vals, 0.5);
                Box::new(move |_| med)
            }
            ImputationScheme::LinearModel | ImputationScheme::InteractionModel => {
                let basis = basis.as_ref().expect("basis built for model schemes");
                let k = basis.ncols();
                let required = if scheme == ImputationScheme::LinearModel { ds.p() + 2 } else { k + 1 };
                if observed.len() < required {
                    return Err(Error::InsufficientObserved { column: name.clone(), observed: observed.len(), required });
                }
                let rows = basis.select_rows(observed.iter());
                let target = DVector::from_iterator(observed.len(), observed.iter().map(|&i| pred.w[(i, j)]));
                let coef = rows
                    .svd(true, true)
                    .solve(&target, 1e-12)
                    .map_err(|_| Error::Singular("imputation regression"))?;
                let fitted = basis * coef;
                Box::new(move |i| fitted[i])
            }
        };
        for i in 0..n {
            out[(i, j)] = if pred.r[(i, j)] == 1.0 { pred.w[(i, j)] } else { fill(i) };
        }
    }
    Ok(out)
}

/// Estimation design for `id`; `XDagger` imputes with `scheme` and stacks
/// `[X | W̃ | R]`.
pub fn prepare_design(ds: &Dataset, id: DesignId, scheme: ImputationScheme) -> Result<Design> {
    match id {
        DesignId::X => Ok(Design::from_dataset(ds)),
        DesignId::XDagger => {
            let w_tilde = impute(ds, scheme)?;
            Ok(Design::from_augmented(&augment(ds, &w_tilde)?))
        }
    }
}

/// One likelihood-ratio test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrTest {
    /// Mask column name, or `joint`.
    pub name: String,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndependenceReport {
    pub columns: Vec<LrTest>,
    pub joint: Option<LrTest>,
    /// Set when the test is vacuous or some mask column could not be tested.
    pub note: Option<String>,
}

fn logistic_loglik(x: DMatrix<f64>, ds: &Dataset) -> Result<f64> {
    let design = Design::from_dataset(&Dataset::new(x, ds.a().clone(), ds.y().clone(), None)?);
    let fit = fit_mle(&design, &GmmSettings::default())?;
    Ok(log_likelihood(&design, &fit.alpha) * design.n() as f64)
}

fn with_columns(x: &DMatrix<f64>, r: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(x.nrows(), x.ncols() + cols.len());
    m.columns_mut(0, x.ncols()).copy_from(x);
    for (c, &j) in cols.iter().enumerate() {
        m.set_column(x.ncols() + c, &r.column(j));
    }
    m
}

fn lr(name: String, base: f64, full: f64, dof: usize) -> Result<LrTest> {
    let statistic = (2.0 * (full - base)).max(0.0);
    let chi = ChiSquared::new(dof as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(LrTest { name, statistic, dof, p_value: chi.sf(statistic) })
}

/// Likelihood-ratio tests of `I(A = 1) ~ (1, X)` against `(1, X, R)`, per
/// mask column and jointly. Mask columns without variation are reported in
/// `note` and left out.
pub fn independence_check(ds: &Dataset) -> Result<IndependenceReport> {
    let Some(pred) = ds.predictive() else {
        return Ok(IndependenceReport {
            columns: Vec::new(),
            joint: None,
            note: Some("no predictive covariates; test vacuous".into()),
        });
    };
    let base = logistic_loglik(ds.x().clone(), ds)?;
    let names = &ds.names().predictive;
    let mut testable = Vec::new();
    let mut constant = Vec::new();
    for j in 0..pred.r.ncols() {
        let col = pred.r.column(j);
        if col.iter().all(|&v| v == col[0]) {
            constant.push(names[j].clone());
        } else {
            testable.push(j);
        }
    }
    let mut columns = Vec::with_capacity(testable.len());
    for &j in &testable {
        let full = logistic_loglik(with_columns(ds.x(), &pred.r, &[j]), ds)?;
        columns.push(lr(names[j].clone(), base, full, 1)?);
    }
    let joint = if testable.is_empty() {
        None
    } else {
        let full = logistic_loglik(with_columns(ds.x(), &pred.r, &testable), ds)?;
        Some(lr("joint".into(), base, full, testable.len())?)
    };
    let note = (!constant.is_empty()).then(|| format!("mask without variation, not tested: {}", constant.join(", ")));
    Ok(IndependenceReport { columns, joint, note })
}
