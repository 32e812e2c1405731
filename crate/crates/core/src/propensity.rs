//! Logistic propensity models fit by maximum likelihood or by
//! covariate-balancing GMM.
//!
//! The balancing moment for unit `i` under rule assignment `d_i` is
//!
//! ```text
//! g_i(α) = { I(A_i = d_i) / π_d − (1 − I(A_i = d_i)) / (1 − π_d) } · h_i
//! ```
//!
//! with `π_d = π(x_i, d_i; α)`. Moment balance functions always carry a
//! leading constant column so that an intercept-only model is identified.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{Design, DesignId};
use crate::error::{Error, Result};
use crate::linalg::{clamp_prob, expit, inf_norm, inverse_spd, solve_spd};
use crate::outcome::OutcomeModel;
use crate::PROB_EPS;

/// Coefficient magnitude beyond which the likelihood fit reports separation.
pub const SEPARATION_BOUND: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Mle,
    Cbps,
}

/// Balancing function used by the GMM fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BalanceFunction {
    /// Outcome-model-aware function required for double robustness.
    FullH,
    /// Covariate powers up to the given order (1 or 2).
    Moments(u8),
}

impl std::str::FromStr for BalanceFunction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(BalanceFunction::FullH),
            "m1" => Ok(BalanceFunction::Moments(1)),
            "m2" => Ok(BalanceFunction::Moments(2)),
            other => Err(format!("unknown balance function `{other}` (expected full, m1 or m2)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weighting {
    Identity,
    TwoStep,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmSettings {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub weighting: Weighting,
    pub ridge: f64,
}

impl Default for GmmSettings {
    fn default() -> Self {
        Self { max_iterations: 200, gradient_tolerance: 1e-8, weighting: Weighting::TwoStep, ridge: 1e-8 }
    }
}

impl GmmSettings {
    fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.gradient_tolerance > 0.0) || !(self.ridge >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid GMM settings {self:?}")));
        }
        Ok(())
    }
}

/// Objective values recorded by a GMM fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmDiagnostics {
    /// Identity-weighted objective at the first-stage solution.
    pub stage1_objective: f64,
    /// Second-stage objective evaluated at the first-stage solution.
    pub stage2_start_objective: f64,
    /// Final objective under the final weighting.
    pub objective: f64,
    /// `max_j |ḡ_j|` at the solution.
    pub moment_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel {
    /// Intercept first, then one coefficient per design covariate.
    pub alpha: DVector<f64>,
    pub design: DesignId,
    pub method: FitMethod,
    pub gmm: Option<GmmDiagnostics>,
    /// Moment system of a balancing fit, kept for its influence function.
    pub balance: Option<BalanceRecord>,
}

/// What a balancing fit balanced and how the moments were weighted.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceRecord {
    pub function: BalanceFunction,
    /// Outcome model entering [`BalanceFunction::FullH`].
    pub outcome: Option<OutcomeModel>,
    pub weighting: Weighting,
    pub ridge: f64,
}

impl PropensityModel {
    pub fn new(alpha: DVector<f64>, design: DesignId, method: FitMethod) -> Self {
        Self { alpha, design, method, gmm: None, balance: None }
    }

    fn check_row(&self, x_row: &[f64]) -> Result<()> {
        if x_row.len() + 1 != self.alpha.len() {
            return Err(Error::DimensionMismatch { what: "propensity row", expected: self.alpha.len() - 1, got: x_row.len() });
        }
        if x_row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite propensity input".into()));
        }
        Ok(())
    }

    fn treated_prob(&self, x_row: &[f64]) -> f64 {
        let eta = self.alpha[0] + x_row.iter().zip(self.alpha.iter().skip(1)).map(|(x, a)| x * a).sum::<f64>();
        expit(eta)
    }

    /// `π(a, x; α)` for `a ∈ {-1, +1}` (unclamped).
    pub fn pi(&self, x_row: &[f64], a: f64) -> Result<f64> {
        self.check_row(x_row)?;
        let p1 = self.treated_prob(x_row);
        Ok(if a == 1.0 { p1 } else { 1.0 - p1 })
    }

    /// Propensity of the arm a rule assigns.
    pub fn pi_rule(&self, x_row: &[f64], d: f64) -> Result<f64> {
        self.pi(x_row, d)
    }

    /// Logistic score `{I(a = 1) − π(1, x)} x̃`.
    pub fn score_alpha(&self, x_row: &[f64], a: f64) -> Result<DVector<f64>> {
        self.check_row(x_row)?;
        let resid = if a == 1.0 { 1.0 } else { 0.0 } - self.treated_prob(x_row);
        Ok(intercepted(x_row) * resid)
    }

    /// `∂π(x, d; α)/∂α = ±π(1)(1 − π(1)) x̃`.
    pub fn dpi_dalpha(&self, x_row: &[f64], d: f64) -> Result<DVector<f64>> {
        self.check_row(x_row)?;
        let p1 = self.treated_prob(x_row);
        let s = if d == 1.0 { 1.0 } else { -1.0 };
        Ok(intercepted(x_row) * (s * p1 * (1.0 - p1)))
    }

    /// `π(1, x_i)` for every row of the design (unclamped).
    pub fn treated_probs(&self, design: &Design) -> DVector<f64> {
        (design.xt() * &self.alpha).map(expit)
    }

    /// `π(x_i, arms_i)` for every row, clamped into `[ε, 1 − ε]`.
    pub fn arm_probs(&self, design: &Design, arms: &DVector<f64>) -> DVector<f64> {
        let p1 = self.treated_probs(design);
        DVector::from_fn(design.n(), |i, _| clamp_prob(if arms[i] == 1.0 { p1[i] } else { 1.0 - p1[i] }))
    }

    /// Per-row scores stacked as an n × dim(α) matrix.
    pub fn score_matrix(&self, design: &Design) -> DMatrix<f64> {
        let p1 = self.treated_probs(design);
        let mut s = design.xt().clone();
        for i in 0..design.n() {
            let resid = if design.a()[i] == 1.0 { 1.0 } else { 0.0 } - p1[i];
            s.row_mut(i).scale_mut(resid);
        }
        s
    }

    /// Rows `∂π(x_i, d_i)/∂α`.
    pub fn dpi_matrix(&self, design: &Design, d: &DVector<f64>) -> DMatrix<f64> {
        let p1 = self.treated_probs(design);
        let mut m = design.xt().clone();
        for i in 0..design.n() {
            let s = if d[i] == 1.0 { 1.0 } else { -1.0 };
            m.row_mut(i).scale_mut(s * p1[i] * (1.0 - p1[i]));
        }
        m
    }
}

fn intercepted(x_row: &[f64]) -> DVector<f64> {
    let mut v = DVector::from_element(x_row.len() + 1, 1.0);
    for (j, x) in x_row.iter().enumerate() {
        v[j + 1] = *x;
    }
    v
}

fn check_treatment_varies(design: &Design) -> Result<()> {
    let a = design.a();
    if a.iter().all(|&v| v == a[0]) {
        return Err(Error::ConstantTreatment);
    }
    Ok(())
}

pub(crate) fn log_likelihood(design: &Design, alpha: &DVector<f64>) -> f64 {
    let eta = design.xt() * alpha;
    let mut ll = 0.0;
    for i in 0..design.n() {
        let t = eta[i];
        // log expit(±t) computed stably
        let s = if design.a()[i] == 1.0 { t } else { -t };
        ll += if s >= 0.0 { -(-s).exp().ln_1p() } else { s - s.exp().ln_1p() };
    }
    ll / design.n() as f64
}

/// Newton–Raphson maximum likelihood fit of the logistic propensity model.
pub fn fit_mle(design: &Design, settings: &GmmSettings) -> Result<PropensityModel> {
    settings.validate()?;
    check_treatment_varies(design)?;
    let xt = design.xt();
    let n = design.n() as f64;
    let t = design.a().map(|a| if a == 1.0 { 1.0 } else { 0.0 });
    let mut alpha = DVector::zeros(xt.ncols());
    let mut ll = log_likelihood(design, &alpha);
    let mut grad_norm = f64::INFINITY;
    for _ in 0..settings.max_iterations {
        let p = (xt * &alpha).map(expit);
        let grad = xt.transpose() * (&t - &p) / n;
        grad_norm = inf_norm(&grad);
        let max_coef = alpha.amax();
        if max_coef > SEPARATION_BOUND || ll > -1e-8 {
            return Err(Error::Separation { max_coef });
        }
        if grad_norm < settings.gradient_tolerance {
            return Ok(PropensityModel::new(alpha, design.id(), FitMethod::Mle));
        }
        let w = p.map(|v| v * (1.0 - v));
        let hess = crate::linalg::weighted_gram(xt, &w) / n;
        let step = solve_spd(&hess, &grad, 1e-12).ok_or(Error::Singular("logistic Hessian"))?;
        let mut scale = 1.0;
        loop {
            let cand = &alpha + &step * scale;
            let cand_ll = log_likelihood(design, &cand);
            // near the optimum the likelihood gain drops below rounding error
            if cand_ll >= ll - 1e-14 * ll.abs().max(1.0) || scale < 1e-10 {
                alpha = cand;
                ll = cand_ll;
                break;
            }
            scale *= 0.5;
        }
    }
    Err(Error::NonConvergence { what: "logistic MLE", iterations: settings.max_iterations, gradient_norm: grad_norm })
}

/// Balancing function values, one row per unit. Moment kinds return the
/// covariate powers (`x`, then `x²` elementwise for order 2) without the
/// constant column that [`fit_cbps`] adds.
pub fn build_h(
    design: &Design,
    d: &DVector<f64>,
    alpha: &DVector<f64>,
    outcome: Option<&OutcomeModel>,
    kind: BalanceFunction,
) -> Result<DMatrix<f64>> {
    let n = design.n();
    if d.len() != n {
        return Err(Error::DimensionMismatch { what: "rule assignments", expected: n, got: d.len() });
    }
    match kind {
        BalanceFunction::Moments(order) => {
            if !(1..=2).contains(&order) {
                return Err(Error::InvalidArgument(format!("moment order {order} not in {{1, 2}}")));
            }
            let m = design.alpha_dim() - 1;
            let cov = design.xt().columns(1, m);
            let mut h = DMatrix::zeros(n, m * order as usize);
            h.columns_mut(0, m).copy_from(&cov);
            if order == 2 {
                h.columns_mut(m, m).copy_from(&cov.map(|v| v * v));
            }
            Ok(h)
        }
        BalanceFunction::FullH => {
            let om = outcome.ok_or(Error::MissingOutcomeModel)?;
            if om.layout != design.layout() {
                return Err(Error::DimensionMismatch {
                    what: "outcome model layout",
                    expected: design.layout().dim(),
                    got: om.layout.dim(),
                });
            }
            let model = PropensityModel::new(alpha.clone(), design.id(), FitMethod::Cbps);
            let pd = model.arm_probs(design, d);
            let dpi = model.dpi_matrix(design, d);
            let m = design.outcome_features(d);
            let q = &m * &om.coef;
            let kb = m.ncols();
            let ka = dpi.ncols();
            let mut h = DMatrix::zeros(n, 2 * kb + 2 * ka);
            for i in 0..n {
                let one_minus = 1.0 - pd[i];
                for j in 0..kb {
                    h[(i, j)] = one_minus * m[(i, j)];
                    h[(i, kb + j)] = one_minus * q[i] * m[(i, j)];
                }
                for j in 0..ka {
                    h[(i, 2 * kb + j)] = dpi[(i, j)];
                    h[(i, 2 * kb + ka + j)] = q[i] * dpi[(i, j)];
                }
            }
            Ok(h)
        }
    }
}

/// Balancing weight `I_d/π_d − (1 − I_d)/(1 − π_d)` and its first and
/// second derivatives with respect to the linear predictor, per row.
fn balance_weights(design: &Design, d: &DVector<f64>, alpha: &DVector<f64>) -> [DVector<f64>; 3] {
    let eta = design.xt() * alpha;
    let n = design.n();
    let mut w = DVector::zeros(n);
    let mut dw = DVector::zeros(n);
    let mut d2w = DVector::zeros(n);
    for i in 0..n {
        let p1 = expit(eta[i]);
        let raw = if d[i] == 1.0 { p1 } else { 1.0 - p1 };
        let pd = clamp_prob(raw);
        let ind = if design.a()[i] == d[i] { 1.0 } else { 0.0 };
        w[i] = ind / pd - (1.0 - ind) / (1.0 - pd);
        let clamped = raw < PROB_EPS || raw > 1.0 - PROB_EPS;
        if !clamped {
            let s = if d[i] == 1.0 { 1.0 } else { -1.0 };
            let dp = s * p1 * (1.0 - p1);
            let d2p = dp * (1.0 - 2.0 * p1);
            let dw_dp = -ind / (pd * pd) - (1.0 - ind) / ((1.0 - pd) * (1.0 - pd));
            let d2w_dp2 = 2.0 * ind / pd.powi(3) - 2.0 * (1.0 - ind) / (1.0 - pd).powi(3);
            dw[i] = dw_dp * dp;
            d2w[i] = d2w_dp2 * dp * dp + dw_dp * d2p;
        }
    }
    [w, dw, d2w]
}

/// Per-row moments (n × k) and derivatives of their mean.
trait MomentSystem {
    fn moments(&self, alpha: &DVector<f64>) -> Result<DMatrix<f64>>;

    fn mean_moment(&self, alpha: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.moments(alpha)?.row_mean().transpose())
    }

    /// Mean moment, its Jacobian (k × dim α) and, when `weight` is given,
    /// the Hessian of `ḡᵀ W ḡ`.
    fn local(&self, alpha: &DVector<f64>, weight: Option<&DMatrix<f64>>) -> Result<Local>;
}

struct Local {
    gbar: DVector<f64>,
    jac: DMatrix<f64>,
    hess: Option<DMatrix<f64>>,
}

struct FixedBalance<'a> {
    design: &'a Design,
    d: &'a DVector<f64>,
    h: DMatrix<f64>,
}

impl MomentSystem for FixedBalance<'_> {
    fn moments(&self, alpha: &DVector<f64>) -> Result<DMatrix<f64>> {
        let [w, _, _] = balance_weights(self.design, self.d, alpha);
        let mut g = self.h.clone();
        for (i, mut row) in g.row_iter_mut().enumerate() {
            row *= w[i];
        }
        Ok(g)
    }

    fn mean_moment(&self, alpha: &DVector<f64>) -> Result<DVector<f64>> {
        let [w, _, _] = balance_weights(self.design, self.d, alpha);
        Ok(self.h.tr_mul(&w) / self.design.n() as f64)
    }

    fn local(&self, alpha: &DVector<f64>, weight: Option<&DMatrix<f64>>) -> Result<Local> {
        let n = self.design.n() as f64;
        let [w, dw, d2w] = balance_weights(self.design, self.d, alpha);
        let gbar = self.h.tr_mul(&w) / n;
        let jac = crate::linalg::weighted_gram_cross(&self.h, &dw, self.design.xt()) / n;
        let hess = weight.map(|weight| {
            // 2 JᵀWJ + 2 P_n[(h_i · Wḡ) w''_i x̃_i x̃_iᵀ]
            let hw = &self.h * (weight * &gbar);
            let coef = hw.component_mul(&d2w);
            let second = crate::linalg::weighted_gram(self.design.xt(), &coef) / n;
            (jac.transpose() * weight * &jac + second) * 2.0
        });
        Ok(Local { gbar, jac, hess })
    }
}

struct OutcomeAwareBalance<'a> {
    design: &'a Design,
    d: &'a DVector<f64>,
    outcome: &'a OutcomeModel,
}

impl OutcomeAwareBalance<'_> {
    fn jacobian(&self, alpha: &DVector<f64>) -> Result<DMatrix<f64>> {
        let k = self.moments(alpha)?.ncols();
        let mut jac = DMatrix::zeros(k, alpha.len());
        for j in 0..alpha.len() {
            let step = 1e-6 * (1.0 + alpha[j].abs());
            let mut up = alpha.clone();
            up[j] += step;
            let mut dn = alpha.clone();
            dn[j] -= step;
            let col = (self.mean_moment(&up)? - self.mean_moment(&dn)?) / (2.0 * step);
            jac.set_column(j, &col);
        }
        Ok(jac)
    }

    fn gradient(&self, alpha: &DVector<f64>, weight: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.jacobian(alpha)?.transpose() * weight * self.mean_moment(alpha)? * 2.0)
    }
}

impl MomentSystem for OutcomeAwareBalance<'_> {
    fn moments(&self, alpha: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut h = build_h(self.design, self.d, alpha, Some(self.outcome), BalanceFunction::FullH)?;
        let [w, _, _] = balance_weights(self.design, self.d, alpha);
        for (i, mut row) in h.row_iter_mut().enumerate() {
            row *= w[i];
        }
        Ok(h)
    }

    fn local(&self, alpha: &DVector<f64>, weight: Option<&DMatrix<f64>>) -> Result<Local> {
        let gbar = self.mean_moment(alpha)?;
        let jac = self.jacobian(alpha)?;
        let hess = match weight {
            None => None,
            Some(weight) => {
                // central differences of the gradient
                let k = alpha.len();
                let mut hess = DMatrix::zeros(k, k);
                for j in 0..k {
                    let h = 1e-5 * (1.0 + alpha[j].abs());
                    let mut up = alpha.clone();
                    up[j] += h;
                    let mut down = alpha.clone();
                    down[j] -= h;
                    let col = (self.gradient(&up, weight)? - self.gradient(&down, weight)?) / (2.0 * h);
                    hess.set_column(j, &col);
                }
                Some((&hess + hess.transpose()) * 0.5)
            }
        };
        Ok(Local { gbar, jac, hess })
    }
}

fn objective(gbar: &DVector<f64>, weight: &DMatrix<f64>) -> f64 {
    (gbar.transpose() * weight * gbar)[(0, 0)]
}

struct StageResult {
    alpha: DVector<f64>,
    objective: f64,
    iterations: usize,
}

/// Damped Newton on `ḡᵀ W ḡ`. Far from the optimum the Gauss–Newton matrix
/// `2 JᵀWJ` is used; once it stops making fast progress the full Hessian
/// takes over, which matters for over-identified fits with large residual
/// moments.
fn minimize_stage(
    system: &dyn MomentSystem,
    start: DVector<f64>,
    weight: &DMatrix<f64>,
    settings: &GmmSettings,
) -> Result<StageResult> {
    let mut alpha = start;
    let mut obj = objective(&system.mean_moment(&alpha)?, weight);
    let mut lambda = 1e-3;
    let mut last_step = f64::INFINITY;
    let mut newton = false;
    let mut gbar_norm = f64::INFINITY;
    for iter in 0..settings.max_iterations {
        let local = system.local(&alpha, newton.then_some(weight))?;
        gbar_norm = inf_norm(&local.gbar);
        let jw = local.jac.transpose() * weight;
        let grad = &jw * &local.gbar * 2.0;
        let small_grad = inf_norm(&grad) < settings.gradient_tolerance;
        if (small_grad && last_step <= 1e-10 * (1.0 + alpha.amax())) || obj < 1e-30 {
            return Ok(StageResult { alpha, objective: obj, iterations: iter });
        }
        let gn = &jw * &local.jac * 2.0;
        let hess = local.hess.unwrap_or_else(|| gn.clone());
        let rhs = -&grad;
        let mut accepted = None;
        // near a stationary point a handful of damping levels is enough
        let mut tries = if small_grad { 4 } else { 40 };
        while tries > 0 {
            tries -= 1;
            let mut damped = hess.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += lambda * (gn[(i, i)].abs() + 1e-12);
            }
            if let Some(step) = solve_spd(&damped, &rhs, 0.0) {
                let cand = &alpha + &step;
                let cand_obj = objective(&system.mean_moment(&cand)?, weight);
                if cand_obj.is_finite() && cand_obj < obj {
                    accepted = Some((cand, cand_obj, step.amax()));
                    lambda = (lambda * 0.1).max(1e-12);
                    break;
                }
            }
            lambda = (lambda * 10.0).min(1e12);
        }
        match accepted {
            Some((cand, cand_obj, step)) => {
                // slow relative progress: switch to the full Hessian
                if !newton && obj - cand_obj < 1e-3 * obj {
                    newton = true;
                }
                alpha = cand;
                obj = cand_obj;
                last_step = step;
            }
            None if !newton => {
                newton = true;
                lambda = 1e-3;
            }
            // no descent direction left at working precision
            None => return Ok(StageResult { alpha, objective: obj, iterations: iter }),
        }
        if alpha.amax() > 1e3 {
            break;
        }
    }
    Err(Error::GmmNonConvergence { moment_norm: gbar_norm, objective: obj })
}

/// Drops exact duplicate columns (for example `r` and `r²` of a binary mask).
fn dedup_columns(h: DMatrix<f64>) -> DMatrix<f64> {
    let mut keep: Vec<usize> = Vec::new();
    for j in 0..h.ncols() {
        if !keep.iter().any(|&k| h.column(k) == h.column(j)) {
            keep.push(j);
        }
    }
    if keep.len() == h.ncols() {
        h
    } else {
        h.select_columns(&keep)
    }
}

fn covariance_weight(g: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let n = g.nrows() as f64;
    let mean = g.row_mean();
    let mut centered = g.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / n;
    inverse_spd(&cov, ridge).ok_or(Error::Singular("GMM weight matrix"))
}

/// Covariate-balancing GMM fit for rule assignments `d`, started from the
/// likelihood fit (`init`, or a fresh [`fit_mle`] when `None`).
pub fn fit_cbps(
    design: &Design,
    d: &DVector<f64>,
    kind: BalanceFunction,
    outcome: Option<&OutcomeModel>,
    settings: &GmmSettings,
    init: Option<&PropensityModel>,
) -> Result<PropensityModel> {
    settings.validate()?;
    if d.len() != design.n() {
        return Err(Error::DimensionMismatch { what: "rule assignments", expected: design.n(), got: d.len() });
    }
    let start = match init {
        Some(m) => {
            if m.alpha.len() != design.alpha_dim() {
                return Err(Error::DimensionMismatch {
                    what: "initial propensity",
                    expected: design.alpha_dim(),
                    got: m.alpha.len(),
                });
            }
            m.alpha.clone()
        }
        None => fit_mle(design, settings)?.alpha,
    };
    let boxed = moment_system(design, d, &start, kind, outcome)?;
    let system = boxed.as_ref();
    let k = system.mean_moment(&start)?.len();
    if k < start.len() {
        return Err(Error::InvalidArgument(format!(
            "{k} balancing moments cannot identify {} coefficients",
            start.len()
        )));
    }
    let identity = DMatrix::identity(k, k);
    let stage1 = minimize_stage(system, start, &identity, settings)?;
    let mut iterations = stage1.iterations;
    let (alpha, objective_value, stage2_start) = match settings.weighting {
        Weighting::Identity => (stage1.alpha, stage1.objective, stage1.objective),
        Weighting::TwoStep if k == stage1.alpha.len() => {
            // just identified: the weighting does not move the root
            (stage1.alpha, stage1.objective, stage1.objective)
        }
        Weighting::TwoStep => {
            let g1 = system.moments(&stage1.alpha)?;
            let weight = covariance_weight(&g1, settings.ridge)?;
            let start_obj = objective(&g1.row_mean().transpose(), &weight);
            let stage2 = minimize_stage(system, stage1.alpha, &weight, settings)?;
            iterations += stage2.iterations;
            (stage2.alpha, stage2.objective, start_obj)
        }
    };
    let gbar = system.mean_moment(&alpha)?;
    let moment_norm = inf_norm(&gbar);
    if !alpha.iter().all(|v| v.is_finite()) {
        return Err(Error::GmmNonConvergence { moment_norm, objective: objective_value });
    }
    Ok(PropensityModel {
        alpha,
        design: design.id(),
        method: FitMethod::Cbps,
        gmm: Some(GmmDiagnostics {
            stage1_objective: stage1.objective,
            stage2_start_objective: stage2_start,
            objective: objective_value,
            moment_norm,
            iterations,
        }),
        balance: Some(BalanceRecord {
            function: kind,
            outcome: match kind {
                BalanceFunction::FullH => outcome.cloned(),
                BalanceFunction::Moments(_) => None,
            },
            weighting: settings.weighting,
            ridge: settings.ridge,
        }),
    })
}

fn moment_system<'a>(
    design: &'a Design,
    d: &'a DVector<f64>,
    alpha: &DVector<f64>,
    kind: BalanceFunction,
    outcome: Option<&'a OutcomeModel>,
) -> Result<Box<dyn MomentSystem + 'a>> {
    Ok(match kind {
        BalanceFunction::Moments(_) => {
            let raw = build_h(design, d, alpha, None, kind)?;
            let mut h = DMatrix::from_element(design.n(), raw.ncols() + 1, 1.0);
            h.columns_mut(1, raw.ncols()).copy_from(&raw);
            Box::new(FixedBalance { design, d, h: dedup_columns(h) })
        }
        BalanceFunction::FullH => {
            let om = outcome.ok_or(Error::MissingOutcomeModel)?;
            Box::new(OutcomeAwareBalance { design, d, outcome: om })
        }
    })
}

/// Per-unit influence of a balancing fit on `α̂`, one row per unit:
/// `ψ_i = −(JᵀWJ)⁻¹ JᵀW g_i`. `None` for fits without a [`BalanceRecord`].
pub fn balance_influence(design: &Design, d: &DVector<f64>, ps: &PropensityModel) -> Result<Option<DMatrix<f64>>> {
    let Some(record) = &ps.balance else {
        return Ok(None);
    };
    if d.len() != design.n() {
        return Err(Error::DimensionMismatch { what: "rule assignments", expected: design.n(), got: d.len() });
    }
    if ps.alpha.len() != design.alpha_dim() {
        return Err(Error::DimensionMismatch {
            what: "propensity coefficients",
            expected: design.alpha_dim(),
            got: ps.alpha.len(),
        });
    }
    let system = moment_system(design, d, &ps.alpha, record.function, record.outcome.as_ref())?;
    let g = system.moments(&ps.alpha)?;
    let jac = system.local(&ps.alpha, None)?.jac;
    let weight = match record.weighting {
        Weighting::Identity => DMatrix::identity(g.ncols(), g.ncols()),
        Weighting::TwoStep => covariance_weight(&g, record.ridge)?,
    };
    let wj = &weight * &jac;
    let bread = jac.transpose() * &wj;
    let bread_inv = inverse_spd(&bread, 0.0).ok_or(Error::Singular("balancing Jacobian"))?;
    Ok(Some(-(g * wj * bread_inv)))
}

/// Mean balancing moment `ḡ(α)` with the constant column included, as
/// minimized by [`fit_cbps`].
pub fn mean_moment(
    design: &Design,
    d: &DVector<f64>,
    alpha: &DVector<f64>,
    kind: BalanceFunction,
    outcome: Option<&OutcomeModel>,
) -> Result<DVector<f64>> {
    let g = match kind {
        BalanceFunction::Moments(_) => {
            let raw = build_h(design, d, alpha, None, kind)?;
            let mut h = DMatrix::from_element(design.n(), raw.ncols() + 1, 1.0);
            h.columns_mut(1, raw.ncols()).copy_from(&raw);
            FixedBalance { design, d, h }.moments(alpha)?
        }
        BalanceFunction::FullH => {
            let om = outcome.ok_or(Error::MissingOutcomeModel)?;
            OutcomeAwareBalance { design, d, outcome: om }.moments(alpha)?
        }
    };
    Ok(g.row_mean().transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;
    use crate::outcome::fit_ols;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn design_from(x: DMatrix<f64>, a: Vec<f64>) -> Design {
        let n = a.len();
        let ds = Dataset::new(x, DVector::from_vec(a), DVector::zeros(n), None).unwrap();
        Design::from_dataset(&ds)
    }

    fn logistic_data(n: usize, seed: u64) -> Design {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::zeros(n, 2);
        let mut a = Vec::with_capacity(n);
        for i in 0..n {
            x[(i, 0)] = rng.random_range(-1.0..1.0);
            x[(i, 1)] = rng.random_range(-2.0..2.0);
            let p = expit(0.5 * x[(i, 0)] - 0.5 * x[(i, 1)]);
            a.push(if rng.random::<f64>() < p { 1.0 } else { -1.0 });
        }
        design_from(x, a)
    }

    #[test]
    fn pi_values() {
        let zero = PropensityModel::new(DVector::zeros(3), DesignId::X, FitMethod::Mle);
        assert_eq!(zero.pi(&[3.0, -7.0], 1.0).unwrap(), 0.5);
        let m = PropensityModel::new(DVector::from_vec(vec![0.0, 0.5, -0.5]), DesignId::X, FitMethod::Mle);
        let p = m.pi(&[1.0, -2.0], 1.0).unwrap();
        assert!((p - 0.817_574_476_193_643_6).abs() < 1e-12);
        assert!((m.pi(&[1.0, -2.0], -1.0).unwrap() - (1.0 - p)).abs() < 1e-15);
        assert!(m.pi(&[1.0], 1.0).is_err());
    }

    #[test]
    fn pi_rule_selects_arm() {
        let m = PropensityModel::new(DVector::from_vec(vec![(0.3_f64 / 0.7).ln()]), DesignId::X, FitMethod::Mle);
        assert!((m.pi_rule(&[], 1.0).unwrap() - 0.3).abs() < 1e-12);
        assert!((m.pi_rule(&[], -1.0).unwrap() - 0.7).abs() < 1e-12);
        let design = logistic_data(30, 1);
        let m = PropensityModel::new(DVector::from_vec(vec![0.1, -0.4, 0.2]), DesignId::X, FitMethod::Mle);
        let d = DVector::from_fn(30, |i, _| if i % 3 == 0 { 1.0 } else { -1.0 });
        let vec = m.arm_probs(&design, &d);
        for i in 0..30 {
            let row: Vec<f64> = design.xt().row(i).iter().skip(1).copied().collect();
            assert!((vec[i] - m.pi_rule(&row, d[i]).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn score_direct_value() {
        let m = PropensityModel::new(DVector::zeros(2), DesignId::X, FitMethod::Mle);
        assert_eq!(m.score_alpha(&[2.0], 1.0).unwrap().as_slice(), &[0.5, 1.0]);
    }

    #[test]
    fn dpi_direct_value_and_sign() {
        let m = PropensityModel::new(DVector::zeros(2), DesignId::X, FitMethod::Mle);
        assert_eq!(m.dpi_dalpha(&[0.0], 1.0).unwrap().as_slice(), &[0.25, 0.0]);
        assert_eq!(m.dpi_dalpha(&[0.0], -1.0).unwrap().as_slice(), &[-0.25, 0.0]);
    }

    fn central_diff(f: impl Fn(&DVector<f64>) -> f64, at: &DVector<f64>, j: usize, h: f64) -> f64 {
        let mut up = at.clone();
        up[j] += h;
        let mut dn = at.clone();
        dn[j] -= h;
        (f(&up) - f(&dn)) / (2.0 * h)
    }

    #[test]
    fn score_and_dpi_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let alpha = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let row = [rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0)];
            let a = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let m = PropensityModel::new(alpha.clone(), DesignId::X, FitMethod::Mle);
            let score = m.score_alpha(&row, a).unwrap();
            let dpi = m.dpi_dalpha(&row, a).unwrap();
            for j in 0..3 {
                let logp = |al: &DVector<f64>| {
                    PropensityModel::new(al.clone(), DesignId::X, FitMethod::Mle).pi(&row, a).unwrap().ln()
                };
                let pi = |al: &DVector<f64>| PropensityModel::new(al.clone(), DesignId::X, FitMethod::Mle).pi(&row, a).unwrap();
                let fd_s = central_diff(logp, &alpha, j, 1e-5);
                let fd_p = central_diff(pi, &alpha, j, 1e-5);
                assert!((fd_s - score[j]).abs() <= 1e-6 * score[j].abs().max(1e-3), "score {fd_s} vs {}", score[j]);
                assert!((fd_p - dpi[j]).abs() <= 1e-6 * dpi[j].abs().max(1e-3), "dpi {fd_p} vs {}", dpi[j]);
            }
        }
    }

    #[test]
    fn intercept_only_mle_is_logit_of_share() {
        let a: Vec<f64> = (0..50).map(|i| if i < 20 { 1.0 } else { -1.0 }).collect();
        let design = design_from(DMatrix::zeros(50, 0), a);
        let m = fit_mle(&design, &GmmSettings::default()).unwrap();
        assert!((m.alpha[0] - (0.4_f64 / 0.6).ln()).abs() < 1e-9);
        assert!((m.alpha[0] + 0.405_465).abs() < 1e-6);
    }

    #[test]
    fn mle_zeroes_the_mean_score() {
        let design = logistic_data(400, 2);
        let m = fit_mle(&design, &GmmSettings::default()).unwrap();
        let s = m.score_matrix(&design);
        assert!(inf_norm(&s.row_mean().transpose()) < 1e-6);
        let again = fit_mle(&design, &GmmSettings::default()).unwrap();
        assert_eq!(m.alpha, again.alpha);
    }

    #[test]
    fn mle_detects_separation() {
        let x = DMatrix::from_column_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let design = design_from(x, vec![-1.0, -1.0, -1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(fit_mle(&design, &GmmSettings::default()), Err(Error::Separation { .. })));
    }

    #[test]
    fn constant_treatment_is_rejected() {
        let design = design_from(DMatrix::zeros(4, 0), vec![1.0; 4]);
        assert!(matches!(fit_mle(&design, &GmmSettings::default()), Err(Error::ConstantTreatment)));
    }

    #[test]
    fn build_h_moment_rows() {
        let design = design_from(DMatrix::from_row_slice(2, 2, &[2.0, -1.0, 0.5, 3.0]), vec![1.0, -1.0]);
        let d = DVector::from_vec(vec![1.0, 1.0]);
        let alpha = DVector::zeros(3);
        let h1 = build_h(&design, &d, &alpha, None, BalanceFunction::Moments(1)).unwrap();
        assert_eq!(h1.row(0).iter().copied().collect::<Vec<_>>(), vec![2.0, -1.0]);
        let h2 = build_h(&design, &d, &alpha, None, BalanceFunction::Moments(2)).unwrap();
        assert_eq!(h2.row(0).iter().copied().collect::<Vec<_>>(), vec![2.0, -1.0, 4.0, 1.0]);
        assert!(matches!(
            build_h(&design, &d, &alpha, None, BalanceFunction::FullH),
            Err(Error::MissingOutcomeModel)
        ));
    }

    #[test]
    fn full_h_with_zero_outcome_has_empty_product_blocks() {
        let design = logistic_data(40, 3);
        let om = OutcomeModel::zeros(design.layout());
        let d = DVector::from_fn(40, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let alpha = DVector::from_vec(vec![0.1, 0.2, -0.3]);
        let h = build_h(&design, &d, &alpha, Some(&om), BalanceFunction::FullH).unwrap();
        let kb = design.layout().dim();
        assert_eq!(h.ncols(), 2 * kb + 2 * 3);
        assert!(h.columns(kb, kb).iter().all(|&v| v == 0.0));
        assert!(h.columns(2 * kb + 3, 3).iter().all(|&v| v == 0.0));
        assert!(h.columns(0, kb).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn two_unit_intercept_balance_gives_half() {
        let design = design_from(DMatrix::zeros(2, 0), vec![1.0, -1.0]);
        let d = DVector::from_vec(vec![1.0, 1.0]);
        let init = PropensityModel::new(DVector::from_vec(vec![0.7]), DesignId::X, FitMethod::Mle);
        let m = fit_cbps(&design, &d, BalanceFunction::Moments(1), None, &GmmSettings::default(), Some(&init))
            .unwrap();
        assert!((m.pi(&[], 1.0).unwrap() - 0.5).abs() < 1e-12, "{:?}", m);
    }

    #[test]
    fn just_identified_balance_is_solved() {
        let design = logistic_data(500, 4);
        let d = DVector::from_fn(500, |i, _| if design.xt()[(i, 1)] > 0.2 { 1.0 } else { -1.0 });
        let m = fit_cbps(&design, &d, BalanceFunction::Moments(1), None, &GmmSettings::default(), None).unwrap();
        let gbar = mean_moment(&design, &d, &m.alpha, BalanceFunction::Moments(1), None).unwrap();
        assert!(inf_norm(&gbar) < 1e-6, "{gbar}");
        let again = fit_cbps(&design, &d, BalanceFunction::Moments(1), None, &GmmSettings::default(), None).unwrap();
        assert_eq!(m.alpha, again.alpha);
    }

    #[test]
    fn two_step_objective_does_not_increase() {
        let design = logistic_data(800, 5);
        let d = DVector::from_fn(800, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let m = fit_cbps(&design, &d, BalanceFunction::Moments(2), None, &GmmSettings::default(), None).unwrap();
        let diag = m.gmm.unwrap();
        assert!(diag.objective <= diag.stage2_start_objective);
    }

    #[test]
    fn full_h_fit_runs_and_balances() {
        let mut design = logistic_data(600, 6);
        let y = DVector::from_fn(600, |i, _| 1.0 + design.xt()[(i, 1)] + 0.5 * design.a()[i]);
        design = design.with_outcome(y);
        let om = fit_ols(&design).unwrap();
        let d = DVector::from_fn(600, |i, _| if design.xt()[(i, 2)] > 0.0 { 1.0 } else { -1.0 });
        let m = fit_cbps(&design, &d, BalanceFunction::FullH, Some(&om), &GmmSettings::default(), None).unwrap();
        let diag = m.gmm.unwrap();
        assert!(diag.objective <= diag.stage2_start_objective + 1e-12);
        assert!(diag.moment_norm < 0.2);
        assert!(matches!(
            fit_cbps(&design, &d, BalanceFunction::FullH, None, &GmmSettings::default(), None),
            Err(Error::MissingOutcomeModel)
        ));
    }

    fn fd_jacobian(design: &Design, d: &DVector<f64>, alpha: &DVector<f64>, kind: BalanceFunction) -> DMatrix<f64> {
        let k = mean_moment(design, d, alpha, kind, None).unwrap().len();
        let mut jac = DMatrix::zeros(k, alpha.len());
        for j in 0..alpha.len() {
            let mut up = alpha.clone();
            up[j] += 1e-6;
            let mut dn = alpha.clone();
            dn[j] -= 1e-6;
            let col = (mean_moment(design, d, &up, kind, None).unwrap() - mean_moment(design, d, &dn, kind, None).unwrap()) / 2e-6;
            jac.set_column(j, &col);
        }
        jac
    }

    #[test]
    fn balance_influence_is_inverse_jacobian_times_moments() {
        let design = logistic_data(400, 8);
        let d = DVector::from_element(400, 1.0);
        let kind = BalanceFunction::Moments(1);
        let m = fit_cbps(&design, &d, kind, None, &GmmSettings::default(), None).unwrap();
        let psi = balance_influence(&design, &d, &m).unwrap().unwrap();
        let jac = fd_jacobian(&design, &d, &m.alpha, kind);
        let g = FixedBalance { design: &design, d: &d, h: {
            let mut h = DMatrix::from_element(400, 3, 1.0);
            h.columns_mut(1, 2).copy_from(&design.xt().columns(1, 2));
            h
        } }
        .moments(&m.alpha)
        .unwrap();
        let oracle = -(g * jac.try_inverse().unwrap().transpose());
        assert!((&psi - &oracle).amax() < 1e-5 * oracle.amax(), "{} vs {}", psi.amax(), oracle.amax());
        assert!(inf_norm(&psi.row_mean().transpose()) < 1e-6);

        let mle = fit_mle(&design, &GmmSettings::default()).unwrap();
        assert!(balance_influence(&design, &d, &mle).unwrap().is_none());
    }

    #[test]
    fn analytic_gmm_hessian_matches_finite_differences() {
        let design = logistic_data(300, 9);
        let d = DVector::from_fn(300, |i, _| if i % 3 == 0 { 1.0 } else { -1.0 });
        let kind = BalanceFunction::Moments(2);
        let alpha = DVector::from_vec(vec![0.2, -0.4, 0.3]);
        let system = moment_system(&design, &d, &alpha, kind, None).unwrap();
        let k = system.mean_moment(&alpha).unwrap().len();
        let weight = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 + i as f64 } else { 0.1 });
        let grad = |a: &DVector<f64>| {
            let local = system.local(a, None).unwrap();
            local.jac.transpose() * &weight * &local.gbar * 2.0
        };
        let hess = system.local(&alpha, Some(&weight)).unwrap().hess.unwrap();
        for j in 0..3 {
            let mut up = alpha.clone();
            up[j] += 1e-6;
            let mut dn = alpha.clone();
            dn[j] -= 1e-6;
            let col = (grad(&up) - grad(&dn)) / 2e-6;
            for i in 0..3 {
                assert!((hess[(i, j)] - col[i]).abs() < 1e-6 * (1.0 + col[i].abs()), "{i},{j}: {} vs {}", hess[(i, j)], col[i]);
            }
        }
        let jac = system.local(&alpha, None).unwrap().jac;
        assert!((&jac - fd_jacobian(&design, &d, &alpha, kind)).amax() < 1e-6);
    }
}
