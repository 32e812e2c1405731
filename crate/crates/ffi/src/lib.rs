//! C ABI bindings.
//!
//! Every entry point returns a status code and writes results through out
//! pointers. Datasets and rules are opaque heap handles released with their
//! `*_free` function. After a non-zero status, `cbdr_last_error` returns a
//! message for the calling thread.
//!
//! Enumerations cross the boundary as `int32_t` and are validated; the
//! accepted values are the `CBDR_*` constants.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cbdr::dataset::{load_csv, Predictive};
use cbdr::missingness::prepare_design;
use cbdr::policy::optimize_rule;
use cbdr::simulation::{oracle_truth, Truth};
use cbdr::value::{AlphaCorrection, BetaConstraint, ValueEngine};
use cbdr::{
    BalanceFunction, Dataset, DesignId, EstimateOptions, EstimatorKind, ImputationScheme, LinearRule, Schema,
    SearchSettings,
};
use nalgebra::{DMatrix, DVector};

pub const CBDR_OK: i32 = 0;
pub const CBDR_ERR_NULL_POINTER: i32 = 1;
pub const CBDR_ERR_INVALID_ARGUMENT: i32 = 2;
pub const CBDR_ERR_INVALID_DATA: i32 = 3;
pub const CBDR_ERR_ESTIMATION: i32 = 4;
pub const CBDR_ERR_IO: i32 = 5;
pub const CBDR_ERR_PANIC: i32 = 6;

pub const CBDR_ESTIMATOR_UDR: i32 = 0;
pub const CBDR_ESTIMATOR_IDR: i32 = 1;
pub const CBDR_ESTIMATOR_CBDR: i32 = 2;
pub const CBDR_ESTIMATOR_CBDR_STAR: i32 = 3;

pub const CBDR_DESIGN_X: i32 = 0;
pub const CBDR_DESIGN_XDAGGER: i32 = 1;

pub const CBDR_IMPUTE_ZERO: i32 = 0;
pub const CBDR_IMPUTE_MEDIAN: i32 = 1;
pub const CBDR_IMPUTE_LINEAR: i32 = 2;
pub const CBDR_IMPUTE_INTERACT: i32 = 3;

pub const CBDR_BALANCE_MOMENTS1: i32 = 0;
pub const CBDR_BALANCE_MOMENTS2: i32 = 1;
pub const CBDR_BALANCE_FULL: i32 = 2;

pub const CBDR_CONSTRAINT_UNCONSTRAINED: i32 = 0;
pub const CBDR_CONSTRAINT_SPHERE: i32 = 1;

pub const CBDR_CORRECTION_MOMENT: i32 = 0;
pub const CBDR_CORRECTION_SCORE: i32 = 1;

pub const CBDR_TRUTH_LINEAR: i32 = 0;
pub const CBDR_TRUTH_NONLINEAR: i32 = 1;

/// Opaque dataset handle.
pub struct CbdrDataset {
    inner: Dataset,
}

/// Opaque linear rule handle.
pub struct CbdrRule {
    inner: LinearRule,
}

/// Estimation settings. Fill with `cbdr_estimate_options_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CbdrEstimateOptions {
    pub balance: i32,
    pub constraint: i32,
    pub correction: i32,
    pub imputation: i32,
    pub seed: u64,
}

/// Rule search budget. Fill with `cbdr_search_options_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CbdrSearchOptions {
    pub restarts: usize,
    pub population: usize,
    pub max_evals: usize,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CbdrEstimate {
    pub value: f64,
    /// Per-observation variance; the estimator variance is `sigma_hat / n`.
    pub sigma_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    /// 1 when every inner optimizer met its tolerance.
    pub converged: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<cbdr::Error> for Failure {
    fn from(e: cbdr::Error) -> Self {
        use cbdr::Error as E;
        let code = match &e {
            E::Io { .. } | E::Csv(_) => CBDR_ERR_IO,
            E::InvalidArgument(_) | E::UnknownColumn(_) => CBDR_ERR_INVALID_ARGUMENT,
            E::NonNumeric { .. }
            | E::MissingMandatory { .. }
            | E::InvalidTreatment(_)
            | E::InvalidData(_)
            | E::DimensionMismatch { .. }
            | E::ConstantTreatment
            | E::ZeroVariance(_)
            | E::NoPredictive => CBDR_ERR_INVALID_DATA,
            _ => CBDR_ERR_ESTIMATION,
        };
        Self { code, message: e.to_string() }
    }
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(text));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            CBDR_OK
        }
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.code
        }
        Err(_) => {
            set_last_error("internal panic");
            CBDR_ERR_PANIC
        }
    }
}

fn non_null<T>(ptr: *const T, what: &str) -> Result<(), Failure> {
    if ptr.is_null() {
        Err(Failure::new(CBDR_ERR_NULL_POINTER, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(ptr, what)?;
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn c_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(ptr, what)?;
    CStr::from_ptr(ptr).to_str().map_err(|_| Failure::new(CBDR_ERR_INVALID_ARGUMENT, format!("{what} is not UTF-8")))
}

unsafe fn c_str_list(ptr: *const *const c_char, len: usize, what: &str) -> Result<Vec<String>, Failure> {
    if len == 0 {
        return Ok(Vec::new());
    }
    non_null(ptr, what)?;
    std::slice::from_raw_parts(ptr, len).iter().map(|&p| c_str(p, what).map(str::to_owned)).collect()
}

fn invalid(what: &str, value: i32) -> Failure {
    Failure::new(CBDR_ERR_INVALID_ARGUMENT, format!("invalid {what} code {value}"))
}

fn estimator(code: i32) -> Result<EstimatorKind, Failure> {
    match code {
        CBDR_ESTIMATOR_UDR => Ok(EstimatorKind::Udr),
        CBDR_ESTIMATOR_IDR => Ok(EstimatorKind::Idr),
        CBDR_ESTIMATOR_CBDR => Ok(EstimatorKind::Cbdr),
        CBDR_ESTIMATOR_CBDR_STAR => Ok(EstimatorKind::CbdrStar),
        other => Err(invalid("estimator", other)),
    }
}

fn design(code: i32) -> Result<DesignId, Failure> {
    match code {
        CBDR_DESIGN_X => Ok(DesignId::X),
        CBDR_DESIGN_XDAGGER => Ok(DesignId::XDagger),
        other => Err(invalid("design", other)),
    }
}

fn imputation(code: i32) -> Result<ImputationScheme, Failure> {
    match code {
        CBDR_IMPUTE_ZERO => Ok(ImputationScheme::Zero),
        CBDR_IMPUTE_MEDIAN => Ok(ImputationScheme::Median),
        CBDR_IMPUTE_LINEAR => Ok(ImputationScheme::LinearModel),
        CBDR_IMPUTE_INTERACT => Ok(ImputationScheme::InteractionModel),
        other => Err(invalid("imputation", other)),
    }
}

fn estimate_options(raw: Option<&CbdrEstimateOptions>) -> Result<(EstimateOptions, ImputationScheme), Failure> {
    let raw = raw.copied().unwrap_or_else(default_estimate_options);
    let mut options = EstimateOptions::default();
    options.balance = match raw.balance {
        CBDR_BALANCE_MOMENTS1 => BalanceFunction::Moments(1),
        CBDR_BALANCE_MOMENTS2 => BalanceFunction::Moments(2),
        CBDR_BALANCE_FULL => BalanceFunction::FullH,
        other => return Err(invalid("balance", other)),
    };
    options.constraint = match raw.constraint {
        CBDR_CONSTRAINT_UNCONSTRAINED => BetaConstraint::Unconstrained,
        CBDR_CONSTRAINT_SPHERE => BetaConstraint::Sphere,
        other => return Err(invalid("constraint", other)),
    };
    options.correction = match raw.correction {
        CBDR_CORRECTION_MOMENT => AlphaCorrection::Moment,
        CBDR_CORRECTION_SCORE => AlphaCorrection::Score,
        other => return Err(invalid("correction", other)),
    };
    options.seed = raw.seed;
    Ok((options, imputation(raw.imputation)?))
}

fn default_estimate_options() -> CbdrEstimateOptions {
    CbdrEstimateOptions {
        balance: CBDR_BALANCE_MOMENTS2,
        constraint: CBDR_CONSTRAINT_UNCONSTRAINED,
        correction: CBDR_CORRECTION_MOMENT,
        imputation: CBDR_IMPUTE_MEDIAN,
        seed: 0,
    }
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cbdr_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cbdr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn cbdr_estimate_options_default(out: *mut CbdrEstimateOptions) -> i32 {
    guard(|| {
        non_null(out, "out")?;
        *out = default_estimate_options();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cbdr_search_options_default(out: *mut CbdrSearchOptions) -> i32 {
    guard(|| {
        non_null(out, "out")?;
        let d = SearchSettings::default();
        *out = CbdrSearchOptions { restarts: d.restarts, population: d.population, max_evals: d.max_evals, seed: d.seed };
        Ok(())
    })
}

/// Builds a dataset from row-major arrays: `x` is `n × p`, `w` is `n × q`
/// with NaN marking unobserved entries (pass null and `q = 0` when there
/// are no predictive covariates). Treatment must be coded ±1.
#[no_mangle]
pub unsafe extern "C" fn cbdr_dataset_new(
    x: *const f64,
    n: usize,
    p: usize,
    a: *const f64,
    y: *const f64,
    w: *const f64,
    q: usize,
    out: *mut *mut CbdrDataset,
) -> i32 {
    guard(|| {
        non_null(out, "out")?;
        let len = n.checked_mul(p).ok_or_else(|| Failure::new(CBDR_ERR_INVALID_ARGUMENT, "n * p overflows"))?;
        let x = DMatrix::from_row_slice(n, p, slice(x, len, "x")?);
        let a = DVector::from_column_slice(slice(a, n, "a")?);
        let y = DVector::from_column_slice(slice(y, n, "y")?);
        let predictive = if q > 0 {
            let len = n.checked_mul(q).ok_or_else(|| Failure::new(CBDR_ERR_INVALID_ARGUMENT, "n * q overflows"))?;
            let w = DMatrix::from_row_slice(n, q, slice(w, len, "w")?);
            let r = w.map(|v| if v.is_nan() { 0.0 } else { 1.0 });
            Some(Predictive { w, r })
        } else {
            None
        };
        let ds = Dataset::new(x, a, y, predictive)?;
        *out = Box::into_raw(Box::new(CbdrDataset { inner: ds }));
        Ok(())
    })
}

/// Reads a CSV file; empty or `NA` cells are allowed in predictive columns.
#[no_mangle]
pub unsafe extern "C" fn cbdr_dataset_load_csv(
    path: *const c_char,
    treatment: *const c_char,
    outcome: *const c_char,
    confounders: *const *const c_char,
    p: usize,
    predictive: *const *const c_char,
    q: usize,
    out: *mut *mut CbdrDataset,
) -> i32 {
    guard(|| {
        non_null(out, "out")?;
        let schema = Schema {
            treatment: c_str(treatment, "treatment")?.to_owned(),
            outcome: c_str(outcome, "outcome")?.to_owned(),
            confounders: c_str_list(confounders, p, "confounders")?,
            predictive: c_str_list(predictive, q, "predictive")?,
        };
        let ds = load_csv(Path::new(c_str(path, "path")?), &schema)?;
        *out = Box::into_raw(Box::new(CbdrDataset { inner: ds }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cbdr_dataset_free(ds: *mut CbdrDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Writes the row count, confounder count and predictive count.
#[no_mangle]
pub unsafe extern "C" fn cbdr_dataset_shape(ds: *const CbdrDataset, n: *mut usize, p: *mut usize, q: *mut usize) -> i32 {
    guard(|| {
        non_null(ds, "dataset")?;
        let ds = &(*ds).inner;
        for (ptr, v) in [(n, ds.n()), (p, ds.p()), (q, ds.q())] {
            if !ptr.is_null() {
                *ptr = v;
            }
        }
        Ok(())
    })
}

/// Rule `d(x) = sign(η₀ + Σ η_j x_j)` from `len = p + 1` coefficients,
/// stored normalized.
#[no_mangle]
pub unsafe extern "C" fn cbdr_rule_new(eta: *const f64, len: usize, out: *mut *mut CbdrRule) -> i32 {
    guard(|| {
        non_null(out, "out")?;
        let eta = DVector::from_column_slice(slice(eta, len, "eta")?);
        let rule = LinearRule::new(eta)?;
        *out = Box::into_raw(Box::new(CbdrRule { inner: rule }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cbdr_rule_free(rule: *mut CbdrRule) {
    if !rule.is_null() {
        drop(Box::from_raw(rule));
    }
}

/// Copies the unit-norm coefficients into `out` (capacity `len`); `len`
/// must equal `p + 1`.
#[no_mangle]
pub unsafe extern "C" fn cbdr_rule_eta(rule: *const CbdrRule, out: *mut f64, len: usize) -> i32 {
    guard(|| {
        non_null(rule, "rule")?;
        non_null(out, "out")?;
        let eta = (*rule).inner.eta();
        if len != eta.len() {
            return Err(Failure::new(CBDR_ERR_INVALID_ARGUMENT, format!("rule has {} coefficients, buffer {len}", eta.len())));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(eta.as_slice());
        Ok(())
    })
}

/// Writes `±1` assignments for every row of `ds` into `out` (capacity `n`).
#[no_mangle]
pub unsafe extern "C" fn cbdr_rule_assign(rule: *const CbdrRule, ds: *const CbdrDataset, out: *mut f64, n: usize) -> i32 {
    guard(|| {
        non_null(rule, "rule")?;
        non_null(ds, "dataset")?;
        non_null(out, "out")?;
        let ds = &(*ds).inner;
        if n != ds.n() {
            return Err(Failure::new(CBDR_ERR_INVALID_ARGUMENT, format!("dataset has {} rows, buffer {n}", ds.n())));
        }
        let d = (*rule).inner.assign_all(ds.x())?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(d.as_slice());
        Ok(())
    })
}

/// Value of `rule` on `ds` under `estimator`, with its variance.
/// `options` may be null for defaults.
#[no_mangle]
pub unsafe extern "C" fn cbdr_estimate(
    ds: *const CbdrDataset,
    rule: *const CbdrRule,
    estimator_code: i32,
    design_code: i32,
    options: *const CbdrEstimateOptions,
    out: *mut CbdrEstimate,
) -> i32 {
    guard(|| {
        non_null(ds, "dataset")?;
        non_null(rule, "rule")?;
        non_null(out, "out")?;
        let kind = estimator(estimator_code)?;
        let id = design(design_code)?;
        let (options, scheme) = estimate_options(options.as_ref())?;
        let ds = &(*ds).inner;
        let d = (*rule).inner.assign_all(ds.x())?;
        let prepared = prepare_design(ds, id, scheme)?;
        let est = ValueEngine::new(&prepared, options)?.evaluate(kind, &d, true)?;
        let (ci_low, ci_high) = est.ci();
        *out = CbdrEstimate {
            value: est.value,
            sigma_hat: est.sigma_hat,
            ci_low,
            ci_high,
            n: est.n,
            converged: i32::from(est.converged),
        };
        Ok(())
    })
}

/// Searches a rule maximizing the training value of `estimator` on `ds`.
/// On success `*out` owns a new rule and `*value` holds its training value.
/// Null `options` or `search` select defaults.
#[no_mangle]
pub unsafe extern "C" fn cbdr_optimize_rule(
    ds: *const CbdrDataset,
    estimator_code: i32,
    design_code: i32,
    options: *const CbdrEstimateOptions,
    search: *const CbdrSearchOptions,
    out: *mut *mut CbdrRule,
    value: *mut f64,
) -> i32 {
    guard(|| {
        non_null(ds, "dataset")?;
        non_null(out, "out")?;
        let kind = estimator(estimator_code)?;
        let id = design(design_code)?;
        let (options, scheme) = estimate_options(options.as_ref())?;
        let settings = match search.as_ref() {
            Some(s) => SearchSettings { restarts: s.restarts, population: s.population, max_evals: s.max_evals, seed: s.seed },
            None => SearchSettings::default(),
        };
        let found = optimize_rule(&(*ds).inner, kind, id, scheme, &options, &settings)?;
        if !value.is_null() {
            *value = found.value;
        }
        *out = Box::into_raw(Box::new(CbdrRule { inner: found.rule }));
        Ok(())
    })
}

/// Monte Carlo value of the optimal rule in the synthetic benchmark.
#[no_mangle]
pub unsafe extern "C" fn cbdr_oracle_truth(truth_code: i32, mc_n: usize, seed: u64, value: *mut f64, se: *mut f64) -> i32 {
    guard(|| {
        non_null(value, "value")?;
        let truth = match truth_code {
            CBDR_TRUTH_LINEAR => Truth::Lin,
            CBDR_TRUTH_NONLINEAR => Truth::Nonlin,
            other => return Err(invalid("truth", other)),
        };
        let t = oracle_truth(truth, mc_n, seed)?;
        *value = t.value;
        if !se.is_null() {
            *se = t.se;
        }
        Ok(())
    })
}
