//! AIPW value estimation, influence-function variance and the four
//! estimator recipes.
//!
//! For a rule assigning `d_i`, with `I_i = I(A_i = d_i)`, `π_i = π(x_i, d_i)`
//! and `Q_i = Q(x_i, d_i)`, the value estimate is
//!
//! ```text
//! V̂ = P_n[ Y I / π − (I − π)/π · Q ]
//! ```
//!
//! and its per-observation variance is `P_n[φ̃²]` with
//! `φ̃ = φ − Γ̂ᵀ ψ`, `φ = I(Y − Q)/π + Q − V̂` and
//! `Γ̂ = P_n[I (Y − Q)/π² · ∂π/∂α]`. For a likelihood fit `ψ = H⁻¹ S` with
//! `H = P_n[S Sᵀ]`; for a balancing fit [`AlphaCorrection`] picks between
//! that and the GMM influence of `α̂`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::design::{Design, DesignId};
use crate::error::{Error, Result};
use crate::linalg::{inverse_spd, quantile, sample_sd};
use crate::missingness::{prepare_design, ImputationScheme};
use crate::optim::{nelder_mead, NelderMeadSettings};
use crate::outcome::{fit_ols, OutcomeModel};
use crate::policy::LinearRule;
use crate::propensity::{balance_influence, fit_cbps, fit_mle, BalanceFunction, FitMethod, GmmSettings, PropensityModel};
use crate::seeding::rng_for;

const H_RIDGE: f64 = 1e-8;

/// The four estimator recipes: (propensity fit, outcome coefficients).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    /// Likelihood propensity, least squares outcome.
    Udr,
    /// Likelihood propensity, variance-stationary outcome coefficients.
    Idr,
    /// Balancing propensity, variance-minimizing outcome coefficients.
    Cbdr,
    /// Balancing propensity, least squares outcome.
    CbdrStar,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [EstimatorKind::Udr, EstimatorKind::Idr, EstimatorKind::Cbdr, EstimatorKind::CbdrStar];

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Udr => "UDR",
            EstimatorKind::Idr => "IDR",
            EstimatorKind::Cbdr => "CBDR",
            EstimatorKind::CbdrStar => "CBDR*",
        }
    }

    pub fn propensity_method(self) -> FitMethod {
        match self {
            EstimatorKind::Udr | EstimatorKind::Idr => FitMethod::Mle,
            EstimatorKind::Cbdr | EstimatorKind::CbdrStar => FitMethod::Cbps,
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "udr" => Ok(EstimatorKind::Udr),
            "idr" => Ok(EstimatorKind::Idr),
            "cbdr" => Ok(EstimatorKind::Cbdr),
            "cbdr*" | "cbdrstar" | "cbdr_star" => Ok(EstimatorKind::CbdrStar),
            other => Err(format!("unknown estimator `{other}` (expected udr, idr, cbdr or cbdrstar)")),
        }
    }
}

/// Constraint on the variance-minimizing outcome coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaConstraint {
    /// Exact minimizer of the convex quadratic variance.
    Unconstrained,
    /// Unit-norm coefficients, found by restarted Nelder–Mead.
    Sphere,
}

/// Influence of `α̂` used in `φ̃` for balancing propensity fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaCorrection {
    /// GMM influence `−(JᵀWJ)⁻¹ JᵀW g_i` of the balancing equations.
    Moment,
    /// Logistic score `H⁻¹ S_i` evaluated at the balancing estimate.
    Score,
}

impl std::str::FromStr for AlphaCorrection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "moment" => Ok(AlphaCorrection::Moment),
            "score" => Ok(AlphaCorrection::Score),
            other => Err(format!("unknown correction `{other}` (expected moment or score)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    pub balance: BalanceFunction,
    pub gmm: GmmSettings,
    pub constraint: BetaConstraint,
    pub correction: AlphaCorrection,
    /// Random restarts for the unit-sphere search.
    pub sphere_restarts: usize,
    pub seed: u64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            balance: BalanceFunction::Moments(2),
            gmm: GmmSettings::default(),
            constraint: BetaConstraint::Unconstrained,
            correction: AlphaCorrection::Moment,
            sphere_restarts: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapRecord {
    pub variance: f64,
    /// Normal-approximation interval `value ± 1.96 sd`.
    pub ci_low: f64,
    pub ci_high: f64,
    pub percentile_low: f64,
    pub percentile_high: f64,
    pub b: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueEstimate {
    pub value: f64,
    /// Per-observation variance `P_n[φ̃²]`; the estimator variance is
    /// `sigma_hat / n`.
    pub sigma_hat: f64,
    pub n: usize,
    pub kind: EstimatorKind,
    pub design: DesignId,
    pub bootstrap: Option<BootstrapRecord>,
    /// False when an inner optimizer stopped on its iteration budget.
    pub converged: bool,
}

impl ValueEstimate {
    pub fn variance(&self) -> f64 {
        self.sigma_hat / self.n as f64
    }

    /// Normal-approximation 95% interval from `sigma_hat`.
    pub fn ci(&self) -> (f64, f64) {
        let half = 1.96 * self.variance().sqrt();
        (self.value - half, self.value + half)
    }
}

/// Row-level quantities shared by the value and variance formulas.
struct Terms {
    ind: DVector<f64>,
    pd: DVector<f64>,
    features: DMatrix<f64>,
}

fn check_inputs(design: &Design, d: &DVector<f64>, ps: &PropensityModel, om: &OutcomeModel) -> Result<()> {
    if d.len() != design.n() {
        return Err(Error::DimensionMismatch { what: "rule assignments", expected: design.n(), got: d.len() });
    }
    if let Some(bad) = d.iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(Error::InvalidTreatment(*bad));
    }
    if ps.alpha.len() != design.alpha_dim() {
        return Err(Error::DimensionMismatch { what: "propensity coefficients", expected: design.alpha_dim(), got: ps.alpha.len() });
    }
    if om.layout != design.layout() {
        return Err(Error::DimensionMismatch { what: "outcome coefficients", expected: design.layout().dim(), got: om.coef.len() });
    }
    Ok(())
}

fn terms(design: &Design, d: &DVector<f64>, ps: &PropensityModel) -> Terms {
    Terms { ind: design.agreement(d), pd: ps.arm_probs(design, d), features: design.outcome_features(d) }
}

/// AIPW value of the rule with assignments `d`.
pub fn aipw_value(design: &Design, d: &DVector<f64>, ps: &PropensityModel, om: &OutcomeModel) -> Result<f64> {
    check_inputs(design, d, ps, om)?;
    let t = terms(design, d, ps);
    let q = &t.features * &om.coef;
    Ok(aipw_from(design.y(), &t.ind, &t.pd, &q))
}

fn aipw_from(y: &DVector<f64>, ind: &DVector<f64>, pd: &DVector<f64>, q: &DVector<f64>) -> f64 {
    let n = y.len();
    (0..n).map(|i| y[i] * ind[i] / pd[i] - (ind[i] - pd[i]) / pd[i] * q[i]).sum::<f64>() / n as f64
}

/// Influence values `φ_i` with the value replaced by `v`.
pub fn influence_phi(design: &Design, d: &DVector<f64>, ps: &PropensityModel, om: &OutcomeModel, v: f64) -> Result<DVector<f64>> {
    check_inputs(design, d, ps, om)?;
    let t = terms(design, d, ps);
    let q = &t.features * &om.coef;
    let y = design.y();
    Ok(DVector::from_fn(design.n(), |i, _| {
        y[i] * t.ind[i] / t.pd[i] - (t.ind[i] - t.pd[i]) / t.pd[i] * q[i] - v
    }))
}

/// `Γ̂ = P_n[I (Y − Q)/π_d² · ∂π_d/∂α]`.
pub fn gamma_matrix(design: &Design, d: &DVector<f64>, ps: &PropensityModel, om: &OutcomeModel) -> Result<DVector<f64>> {
    check_inputs(design, d, ps, om)?;
    let t = terms(design, d, ps);
    let q = &t.features * &om.coef;
    let dpi = ps.dpi_matrix(design, d);
    let y = design.y();
    let c = DVector::from_fn(design.n(), |i, _| t.ind[i] * (y[i] - q[i]) / (t.pd[i] * t.pd[i]));
    Ok(dpi.transpose() * c / design.n() as f64)
}

/// `H = P_n[S Sᵀ]` of the logistic score.
pub fn h_alpha_alpha(design: &Design, ps: &PropensityModel) -> DMatrix<f64> {
    let s = ps.score_matrix(design);
    s.transpose() * &s / design.n() as f64
}

fn invert_h(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Ok(ch.inverse());
    }
    inverse_spd(h, H_RIDGE).ok_or(Error::Singular("score outer-product matrix"))
}

/// Rows `ψ_i` of the first-order expansion `α̂ − α ≈ P_n[ψ]`.
pub fn alpha_influence(design: &Design, d: &DVector<f64>, ps: &PropensityModel, correction: AlphaCorrection) -> Result<DMatrix<f64>> {
    if correction == AlphaCorrection::Moment {
        if let Some(psi) = balance_influence(design, d, ps)? {
            return Ok(psi);
        }
    }
    let h_inv = invert_h(&h_alpha_alpha(design, ps))?;
    Ok(ps.score_matrix(design) * h_inv)
}

/// `Σ̂ = P_n[(φ̃ − mean φ̃)²]`.
pub fn sigma_hat(design: &Design, d: &DVector<f64>, ps: &PropensityModel, om: &OutcomeModel) -> Result<f64> {
    sigma_hat_with(design, d, ps, om, Some(AlphaCorrection::Moment))
}

/// As [`sigma_hat`]; `None` drops the `Γ̂` term.
pub fn sigma_hat_with(
    design: &Design,
    d: &DVector<f64>,
    ps: &PropensityModel,
    om: &OutcomeModel,
    correction: Option<AlphaCorrection>,
) -> Result<f64> {
    let v = aipw_value(design, d, ps, om)?;
    let mut phi = influence_phi(design, d, ps, om, v)?;
    if let Some(correction) = correction {
        let gamma = gamma_matrix(design, d, ps, om)?;
        phi -= alpha_influence(design, d, ps, correction)? * gamma;
    }
    let mean = phi.mean();
    Ok(phi.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / design.n() as f64)
}

/// `Σ̂(β) = P_n[(a + Bβ)²]` with centered `a` and `B`: the variance as a
/// function of the outcome coefficients for a fixed propensity fit.
#[derive(Debug, Clone)]
pub struct VarianceQuadratic {
    pub a: DVector<f64>,
    pub b: DMatrix<f64>,
}

impl VarianceQuadratic {
    pub fn build(design: &Design, d: &DVector<f64>, ps: &PropensityModel, correction: AlphaCorrection) -> Result<Self> {
        check_inputs(design, d, ps, &OutcomeModel::zeros(design.layout()))?;
        let n = design.n();
        let nf = n as f64;
        let t = terms(design, d, ps);
        let y = design.y();
        let dpi = ps.dpi_matrix(design, d);
        let sg = alpha_influence(design, d, ps, correction)?;

        let w_y = DVector::from_fn(n, |i, _| t.ind[i] * y[i] / (t.pd[i] * t.pd[i]));
        let g0 = dpi.transpose() * w_y / nf;
        let w_m = DVector::from_fn(n, |i, _| t.ind[i] / (t.pd[i] * t.pd[i]));
        let g1 = crate::linalg::weighted_gram_cross(&dpi, &w_m, &t.features) / nf;

        let mut a = DVector::from_fn(n, |i, _| t.ind[i] * y[i] / t.pd[i]) - &sg * g0;
        let mut b = t.features.clone();
        for i in 0..n {
            b.row_mut(i).scale_mut(1.0 - t.ind[i] / t.pd[i]);
        }
        b += &sg * g1;

        let am = a.mean();
        a.add_scalar_mut(-am);
        let bm = b.row_mean();
        for mut row in b.row_iter_mut() {
            row -= &bm;
        }
        Ok(Self { a, b })
    }

    pub fn eval(&self, beta: &DVector<f64>) -> f64 {
        (&self.a + &self.b * beta).norm_squared() / self.a.len() as f64
    }

    pub fn gradient(&self, beta: &DVector<f64>) -> DVector<f64> {
        self.b.transpose() * (&self.a + &self.b * beta) * (2.0 / self.a.len() as f64)
    }

    /// Exact minimizer of the normal equations, or `None` when `BᵀB` is
    /// numerically singular.
    pub fn solve(&self) -> Option<DVector<f64>> {
        let gram = self.b.transpose() * &self.b;
        let rhs = -(self.b.transpose() * &self.a);
        let eig = gram.clone().symmetric_eigen();
        let max = eig.eigenvalues.amax();
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) || min <= 1e-12 * max {
            return None;
        }
        let ch = gram.clone().cholesky()?;
        let mut beta = ch.solve(&rhs);
        // one step of iterative refinement
        let resid = &rhs - &gram * &beta;
        beta += ch.solve(&resid);
        Some(beta)
    }

    /// Minimum-norm minimizer. The normal equations are always consistent,
    /// so this is a stationary point even when `BᵀB` is singular (a rule
    /// that treats everyone alike makes the contrast columns copies of the
    /// main effects); `Σ̂` and the value are flat along the null directions.
    pub fn solve_min_norm(&self) -> Option<DVector<f64>> {
        let svd = self.b.clone().svd(true, true);
        let top = svd.singular_values.amax();
        if !(top > 0.0) {
            return None;
        }
        let beta = svd.solve(&(-&self.a), 1e-8 * top).ok()?;
        beta.iter().all(|v| v.is_finite()).then_some(beta)
    }
}

/// Outcome coefficients minimizing `Σ̂(α̂, β)`. The flag is false when the
/// derivative-free fallback hit its budget.
pub fn beta_opt(
    design: &Design,
    d: &DVector<f64>,
    ps: &PropensityModel,
    init: &OutcomeModel,
    constraint: BetaConstraint,
    options: &EstimateOptions,
) -> Result<(OutcomeModel, bool)> {
    let quad = VarianceQuadratic::build(design, d, ps, options.correction)?;
    beta_opt_from(&quad, init, constraint, options)
}

fn beta_opt_from(
    quad: &VarianceQuadratic,
    init: &OutcomeModel,
    constraint: BetaConstraint,
    options: &EstimateOptions,
) -> Result<(OutcomeModel, bool)> {
    if init.coef.len() != quad.b.ncols() {
        return Err(Error::DimensionMismatch { what: "initial outcome coefficients", expected: quad.b.ncols(), got: init.coef.len() });
    }
    match constraint {
        BetaConstraint::Unconstrained => {
            if let Some(beta) = quad.solve() {
                return Ok((OutcomeModel::new(beta, init.layout)?, true));
            }
            let m = nelder_mead(|b| quad.eval(b), &init.coef, &NelderMeadSettings::default());
            let (coef, ok) = if m.value <= quad.eval(&init.coef) { (m.x, m.converged) } else { (init.coef.clone(), m.converged) };
            Ok((OutcomeModel::new(coef, init.layout)?, ok))
        }
        BetaConstraint::Sphere => {
            let (coef, ok) = sphere_minimize(quad, &init.coef, options.sphere_restarts, options.seed);
            Ok((OutcomeModel::new(coef, init.layout)?, ok))
        }
    }
}

fn unit(v: &DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        let mut e = DVector::zeros(v.len());
        e[0] = 1.0;
        e
    }
}

/// Minimizes `Σ̂(β)` over `‖β‖ = 1` by Nelder–Mead on the projected
/// objective, from `init/‖init‖` and `restarts` random directions.
pub fn sphere_minimize(quad: &VarianceQuadratic, init: &DVector<f64>, restarts: usize, seed: u64) -> (DVector<f64>, bool) {
    let objective = |u: &DVector<f64>| {
        let norm = u.norm();
        if norm < 1e-12 {
            f64::INFINITY
        } else {
            quad.eval(&(u / norm))
        }
    };
    let settings = NelderMeadSettings { max_evals: 2000 * init.len().max(1), ..Default::default() };
    let start = unit(init);
    let mut best = start.clone();
    let mut best_val = quad.eval(&start);
    let mut all_converged = true;
    let mut rng = rng_for(seed, 0x5e4e);
    for r in 0..=restarts {
        let from = if r == 0 {
            start.clone()
        } else {
            unit(&DVector::from_fn(init.len(), |_, _| rng.sample::<f64, _>(StandardNormal)))
        };
        let m = nelder_mead(objective, &from, &settings);
        all_converged &= m.converged;
        let cand = unit(&m.x);
        let val = quad.eval(&cand);
        if val < best_val {
            best_val = val;
            best = cand;
        }
    }
    (best, all_converged)
}

/// Stationary point of `Σ̂(α̂^mle, β)`.
pub fn idr_beta(design: &Design, d: &DVector<f64>, ps_mle: &PropensityModel, init: &OutcomeModel) -> Result<OutcomeModel> {
    if ps_mle.method != FitMethod::Mle {
        return Err(Error::InvalidArgument("IDR coefficients require a likelihood propensity fit".into()));
    }
    let quad = VarianceQuadratic::build(design, d, ps_mle, AlphaCorrection::Score)?;
    let beta = quad.solve().or_else(|| quad.solve_min_norm()).ok_or(Error::Singular("variance normal equations"))?;
    OutcomeModel::new(beta, init.layout)
}

/// Value estimation on one design with the rule-independent nuisances
/// (likelihood propensity and least squares outcome) fitted once.
pub struct ValueEngine<'a> {
    design: &'a Design,
    options: EstimateOptions,
    mle: PropensityModel,
    ols: OutcomeModel,
}

impl<'a> ValueEngine<'a> {
    pub fn new(design: &'a Design, options: EstimateOptions) -> Result<Self> {
        let mle = fit_mle(design, &options.gmm)?;
        let ols = fit_ols(design)?;
        Ok(Self { design, options, mle, ols })
    }

    pub fn design(&self) -> &Design {
        self.design
    }

    pub fn mle(&self) -> &PropensityModel {
        &self.mle
    }

    pub fn ols(&self) -> &OutcomeModel {
        &self.ols
    }

    fn cbps(&self, d: &DVector<f64>) -> Result<PropensityModel> {
        fit_cbps(self.design, d, self.options.balance, Some(&self.ols), &self.options.gmm, Some(&self.mle))
    }

    /// Nuisance models of `kind` for assignments `d`, plus a convergence flag.
    pub fn fit_nuisances(&self, kind: EstimatorKind, d: &DVector<f64>) -> Result<(PropensityModel, OutcomeModel, bool)> {
        Ok(match kind {
            EstimatorKind::Udr => (self.mle.clone(), self.ols.clone(), true),
            EstimatorKind::Idr => {
                let om = idr_beta(self.design, d, &self.mle, &self.ols)?;
                (self.mle.clone(), om, true)
            }
            EstimatorKind::Cbdr => {
                let ps = self.cbps(d)?;
                let (om, ok) = beta_opt(self.design, d, &ps, &self.ols, self.options.constraint, &self.options)?;
                (ps, om, ok)
            }
            EstimatorKind::CbdrStar => (self.cbps(d)?, self.ols.clone(), true),
        })
    }

    /// Value of the rule with assignments `d` under `kind`; `sigma_hat` is
    /// computed only when `with_sigma` is set (0 otherwise).
    pub fn evaluate(&self, kind: EstimatorKind, d: &DVector<f64>, with_sigma: bool) -> Result<ValueEstimate> {
        let (ps, om, converged) = self.fit_nuisances(kind, d)?;
        self.evaluate_with(kind, d, &ps, &om, with_sigma, converged)
    }

    /// Value with externally supplied nuisance models.
    pub fn evaluate_with(
        &self,
        kind: EstimatorKind,
        d: &DVector<f64>,
        ps: &PropensityModel,
        om: &OutcomeModel,
        with_sigma: bool,
        converged: bool,
    ) -> Result<ValueEstimate> {
        let value = aipw_value(self.design, d, ps, om)?;
        let sigma = if with_sigma { sigma_hat_with(self.design, d, ps, om, Some(self.options.correction))? } else { 0.0 };
        Ok(ValueEstimate {
            value,
            sigma_hat: sigma,
            n: self.design.n(),
            kind,
            design: self.design.id(),
            bootstrap: None,
            converged,
        })
    }
}

/// Full recipe for `kind` on `design` with assignments `d`; `sigma_hat` is
/// always attached.
pub fn estimate(kind: EstimatorKind, design: &Design, d: &DVector<f64>, options: &EstimateOptions) -> Result<ValueEstimate> {
    ValueEngine::new(design, *options)?.evaluate(kind, d, true)
}

/// Nonparametric bootstrap of the whole pipeline (imputation, nuisance fits
/// and value) for a fixed rule. Replicates run in parallel with
/// replicate-indexed seeds.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap(
    kind: EstimatorKind,
    ds: &Dataset,
    rule: &LinearRule,
    design_id: DesignId,
    scheme: ImputationScheme,
    b: usize,
    seed: u64,
    options: &EstimateOptions,
    point: f64,
) -> Result<BootstrapRecord> {
    if b < 2 {
        return Err(Error::InvalidArgument("bootstrap needs at least two replicates".into()));
    }
    let n = ds.n();
    let one = |stream: u64| -> Result<f64> {
        let mut rng = rng_for(seed, stream);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let resample = ds.select_rows(&idx)?;
        let design = prepare_design(&resample, design_id, scheme)?;
        let d = rule.assign_all(resample.x())?;
        Ok(ValueEngine::new(&design, *options)?.evaluate(kind, &d, false)?.value)
    };
    let results: Vec<Option<f64>> = (0..b as u64)
        .into_par_iter()
        .map(|r| one(2 * r).or_else(|_| one(2 * r + 1)).ok())
        .collect();
    let failures = results.iter().filter(|r| r.is_none()).count();
    if failures as f64 > 0.05 * b as f64 {
        return Err(Error::ReplicateFailures { failed: failures, total: b });
    }
    let mut values: Vec<f64> = results.into_iter().flatten().collect();
    let sd = sample_sd(&values);
    values.sort_by(f64::total_cmp);
    Ok(BootstrapRecord {
        variance: sd * sd,
        ci_low: point - 1.96 * sd,
        ci_high: point + 1.96 * sd,
        percentile_low: quantile(&values, 0.025),
        percentile_high: quantile(&values, 0.975),
        b,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;
    use crate::linalg::expit;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(alpha: &[f64], design: DesignId) -> PropensityModel {
        PropensityModel::new(DVector::from_row_slice(alpha), design, FitMethod::Mle)
    }

    fn intercept_only(y: &[f64], a: &[f64]) -> Design {
        let n = y.len();
        let ds = Dataset::new(DMatrix::zeros(n, 0), DVector::from_row_slice(a), DVector::from_row_slice(y), None).unwrap();
        Design::from_dataset(&ds)
    }

    #[test]
    fn aipw_single_unit_collapses_to_outcome() {
        let design = intercept_only(&[3.7], &[1.0]);
        // π_d = 1 − ε after clamping; the value is Y up to the clamp
        let ps = model(&[50.0], DesignId::X);
        let om = OutcomeModel::new(DVector::from_vec(vec![9.0, 1.0]), design.layout()).unwrap();
        let v = aipw_value(&design, &DVector::from_vec(vec![1.0]), &ps, &om).unwrap();
        assert!((v - 3.7).abs() < 1e-4);
    }

    #[test]
    fn aipw_two_unit_hand_evaluation() {
        let design = intercept_only(&[2.0, 1.0], &[1.0, -1.0]);
        let ps = model(&[0.0], DesignId::X);
        // Q(d = 1) = 1
        let om = OutcomeModel::new(DVector::from_vec(vec![0.5, 0.5]), design.layout()).unwrap();
        let d = DVector::from_vec(vec![1.0, 1.0]);
        assert!((aipw_value(&design, &d, &ps, &om).unwrap() - 2.0).abs() < 1e-15);
    }

    fn random_design(n: usize, seed: u64, f: impl Fn(f64, f64, f64) -> f64) -> Design {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::zeros(n, 2);
        let mut a = DVector::zeros(n);
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let x1: f64 = rng.random_range(-1.0..1.0);
            let x2: f64 = rng.random_range(-2.0..2.0);
            x[(i, 0)] = x1;
            x[(i, 1)] = x2;
            a[i] = if rng.random::<f64>() < expit(0.5 * x1 - 0.5 * x2) { 1.0 } else { -1.0 };
            y[i] = f(x1, x2, a[i]) + rng.sample::<f64, _>(StandardNormal);
        }
        Design::from_dataset(&Dataset::new(x, a, y, None).unwrap())
    }

    fn rule_d(design: &Design) -> DVector<f64> {
        DVector::from_fn(design.n(), |i, _| {
            if 1.0 - 2.0 * design.xt()[(i, 1)] + design.xt()[(i, 2)] >= 0.0 {
                1.0
            } else {
                -1.0
            }
        })
    }

    #[test]
    fn ipw_when_outcome_is_zero() {
        let design = random_design(100, 1, |x1, _, a| x1 + a);
        let ps = fit_mle(&design, &GmmSettings::default()).unwrap();
        let d = rule_d(&design);
        let om = OutcomeModel::zeros(design.layout());
        let pd = ps.arm_probs(&design, &d);
        let ind = design.agreement(&d);
        let ipw = (0..100).map(|i| design.y()[i] * ind[i] / pd[i]).sum::<f64>() / 100.0;
        assert!((aipw_value(&design, &d, &ps, &om).unwrap() - ipw).abs() < 1e-12);
    }

    #[test]
    fn influence_forms_agree_and_center() {
        let design = random_design(200, 2, |x1, x2, a| x1 * x1 + a * x2);
        let ps = fit_mle(&design, &GmmSettings::default()).unwrap();
        let om = fit_ols(&design).unwrap();
        let d = rule_d(&design);
        let v = aipw_value(&design, &d, &ps, &om).unwrap();
        let phi = influence_phi(&design, &d, &ps, &om, v).unwrap();
        assert!(phi.mean().abs() < 1e-10);
        let pd = ps.arm_probs(&design, &d);
        let ind = design.agreement(&d);
        let q = om.predict_design(&design, &d);
        for i in 0..design.n() {
            let simple = ind[i] * (design.y()[i] - q[i]) / pd[i] + q[i] - v;
            assert!((simple - phi[i]).abs() < 1e-10);
            if ind[i] == 0.0 {
                assert!((phi[i] - (q[i] - v)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gamma_single_unit() {
        // π_d = 0.5, ∂π_d/∂α = (0.25, 0) at x = 0, Y − Q = 2
        let ds = Dataset::new(DMatrix::zeros(1, 1), DVector::from_vec(vec![1.0]), DVector::from_vec(vec![2.0]), None).unwrap();
        let design = Design::from_dataset(&ds);
        let ps = model(&[0.0, 0.0], DesignId::X);
        let om = OutcomeModel::zeros(design.layout());
        let g = gamma_matrix(&design, &DVector::from_vec(vec![1.0]), &ps, &om).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-15 && g[1] == 0.0);
    }

    #[test]
    fn gamma_vanishes_for_perfect_outcome() {
        let design = random_design(80, 3, |x1, _, _| x1);
        let om = fit_ols(&design).unwrap();
        let d = rule_d(&design);
        let q = om.predict_design(&design, &d);
        let design = design.with_outcome(DVector::from_fn(80, |i, _| if design.a()[i] == d[i] { q[i] } else { design.y()[i] }));
        let ps = fit_mle(&design, &GmmSettings::default()).unwrap();
        let g = gamma_matrix(&design, &d, &ps, &om).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn h_matrix_is_symmetric_psd_and_reduces_for_intercept() {
        let design = random_design(150, 4, |x1, _, _| x1);
        let ps = fit_mle(&design, &GmmSettings::default()).unwrap();
        let h = h_alpha_alpha(&design, &ps);
        assert!((&h - h.transpose()).amax() < 1e-15);
        assert!(h.clone().symmetric_eigen().eigenvalues.min() >= -1e-10);

        let d0 = intercept_only(&[1.0, 2.0, 3.0, 4.0], &[1.0, -1.0, -1.0, 1.0]);
        let ps0 = model(&[0.3], DesignId::X);
        let p = expit(0.3);
        let want = (2.0 * (1.0 - p).powi(2) + 2.0 * p * p) / 4.0;
        assert!((h_alpha_alpha(&d0, &ps0)[(0, 0)] - want).abs() < 1e-15);
    }

    #[test]
    fn sigma_is_zero_for_constant_outcome_with_exact_model() {
        let design = random_design(120, 5, |_, _, _| 0.0).with_outcome(DVector::from_element(120, 4.2));
        let ps = fit_mle(&design, &GmmSettings::default()).unwrap();
        let om = fit_ols(&design).unwrap();
        let d = rule_d(&design);
        assert!(sigma_hat(&design, &d, &ps, &om).unwrap() < 1e-12);
    }

    #[test]
    fn gamma_correction_matters_under_outcome_misspecification() {
        let design = random_design(500, 6, |x1, x2, a| 10.0 * x1 * x1 + 5.0 * a * x2.abs());
        let ps = fit_mle(&design, &GmmSettings::default()).unwrap();
        let om = fit_ols(&design).unwrap();
        let d = rule_d(&design);
        let with = sigma_hat_with(&design, &d, &ps, &om, Some(AlphaCorrection::Score)).unwrap();
        let without = sigma_hat_with(&design, &d, &ps, &om, None).unwrap();
        assert!(with != without);
    }

    #[test]
    fn quadratic_matches_direct_sigma() {
        let design = random_design(300, 7, |x1, x2, a| x1 * x2 + a * (1.0 - x1));
        let ps = fit_mle(&design, &GmmSettings::default()).unwrap();
        let d = rule_d(&design);
        let quad = VarianceQuadratic::build(&design, &d, &ps, AlphaCorrection::Moment).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let coef = DVector::from_fn(design.layout().dim(), |_, _| rng.random_range(-2.0..2.0));
            let om = OutcomeModel::new(coef.clone(), design.layout()).unwrap();
            let direct = sigma_hat(&design, &d, &ps, &om).unwrap();
            assert!((quad.eval(&coef) - direct).abs() < 1e-9 * direct.max(1.0));
        }
    }

    #[test]
    fn sigma_shift_invariant_with_refit() {
        let design = random_design(300, 9, |x1, x2, a| x1 + x2 * x2 + a);
        let shifted = design.with_outcome(design.y().add_scalar(17.0));
        let d = rule_d(&design);
        let ps = fit_mle(&design, &GmmSettings::default()).unwrap();
        let s0 = sigma_hat(&design, &d, &ps, &fit_ols(&design).unwrap()).unwrap();
        let s1 = sigma_hat(&shifted, &d, &ps, &fit_ols(&shifted).unwrap()).unwrap();
        assert!((s0 - s1).abs() < 1e-8 * s0);
    }

    #[test]
    fn idr_matches_unconstrained_and_is_stationary() {
        let design = random_design(400, 10, |x1, x2, a| 3.0 * x1 * x1 + a * x2.abs());
        let d = rule_d(&design);
        let engine = ValueEngine::new(&design, EstimateOptions::default()).unwrap();
        let idr = idr_beta(&design, &d, engine.mle(), engine.ols()).unwrap();
        let (opt, ok) = beta_opt(&design, &d, engine.mle(), engine.ols(), BetaConstraint::Unconstrained, &EstimateOptions::default()).unwrap();
        assert!(ok);
        assert!((&idr.coef - &opt.coef).amax() < 1e-8);
        let quad = VarianceQuadratic::build(&design, &d, engine.mle(), AlphaCorrection::Score).unwrap();
        assert!(quad.gradient(&idr.coef).amax() < 1e-6);
        assert!(quad.eval(&opt.coef) <= quad.eval(&engine.ols().coef));
    }

    #[test]
    fn idr_survives_a_rule_that_treats_everyone() {
        let design = random_design(200, 13, |x1, x2, a| x1 - x2 + a * x1);
        let d = DVector::from_element(design.n(), 1.0);
        let engine = ValueEngine::new(&design, EstimateOptions::default()).unwrap();
        let quad = VarianceQuadratic::build(&design, &d, engine.mle(), AlphaCorrection::Score).unwrap();
        assert!(quad.solve().is_none());
        let idr = idr_beta(&design, &d, engine.mle(), engine.ols()).unwrap();
        assert!(quad.gradient(&idr.coef).amax() < 1e-6 * quad.b.amax().max(1.0));
        assert!(quad.eval(&idr.coef) <= quad.eval(&engine.ols().coef) + 1e-9);
        assert!(estimate(EstimatorKind::Idr, &design, &d, &EstimateOptions::default()).unwrap().value.is_finite());
    }

    #[test]
    fn flat_variance_returns_init() {
        // every unit follows the rule with π_d ≈ 1 and Y constant: Σ̂ does not depend on β
        let n = 5;
        let design = intercept_only(&[2.0; 5], &[1.0; 5]);
        let ps = model(&[40.0], DesignId::X);
        let d = DVector::from_element(n, 1.0);
        let init = OutcomeModel::new(DVector::from_vec(vec![0.3, -0.7]), design.layout()).unwrap();
        let (out, _) = beta_opt(&design, &d, &ps, &init, BetaConstraint::Unconstrained, &EstimateOptions::default()).unwrap();
        assert_eq!(out.coef, init.coef);
    }

    #[test]
    fn udr_is_mle_plus_ols_plus_aipw() {
        let design = random_design(300, 11, |x1, x2, a| x1 - x2 + a * x1);
        let d = rule_d(&design);
        let est = estimate(EstimatorKind::Udr, &design, &d, &EstimateOptions::default()).unwrap();
        let ps = fit_mle(&design, &GmmSettings::default()).unwrap();
        let om = fit_ols(&design).unwrap();
        assert_eq!(est.value, aipw_value(&design, &d, &ps, &om).unwrap());
        assert!(est.sigma_hat > 0.0);
    }

    #[test]
    fn all_recipes_run() {
        let design = random_design(400, 12, |x1, x2, a| 4.0 * x1 - x2 + a * (1.0 - 2.0 * x1 + x2));
        let d = rule_d(&design);
        for kind in EstimatorKind::ALL {
            let est = estimate(kind, &design, &d, &EstimateOptions::default()).unwrap();
            assert!(est.value.is_finite() && est.sigma_hat > 0.0, "{kind}");
        }
    }
}
