//! Linear outcome working models with treatment interactions.
//!
//! For the confounder design the feature vector is `(1, a, x, a·x)`; for the
//! augmented design it is `(1, a, x, a·x, r, a·r, w̃, a·w̃)`, where the
//! covariate row is laid out as `[x | w̃ | r]`.

use nalgebra::DVector;

use crate::design::{Design, DesignId};
use crate::error::{Error, Result};
use crate::linalg::{dependent_columns, solve_spd};

const OLS_RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutcomeLayout {
    pub design: DesignId,
    pub p: usize,
    pub q: usize,
}

impl OutcomeLayout {
    pub fn confounders(p: usize) -> Self {
        Self { design: DesignId::X, p, q: 0 }
    }

    pub fn augmented(p: usize, q: usize) -> Self {
        Self { design: DesignId::XDagger, p, q }
    }

    /// Length of the covariate row this layout expects.
    pub fn row_len(&self) -> usize {
        match self.design {
            DesignId::X => self.p,
            DesignId::XDagger => self.p + 2 * self.q,
        }
    }

    /// Number of coefficients.
    pub fn dim(&self) -> usize {
        2 * (1 + self.row_len())
    }

    pub(crate) fn fill_features(&self, row: &[f64], a: f64, out: &mut [f64]) {
        let p = self.p;
        out[0] = 1.0;
        out[1] = a;
        for j in 0..p {
            out[2 + j] = row[j];
            out[2 + p + j] = a * row[j];
        }
        if self.design == DesignId::XDagger {
            let q = self.q;
            let base = 2 + 2 * p;
            for j in 0..q {
                let w = row[p + j];
                let r = row[p + q + j];
                out[base + j] = r;
                out[base + q + j] = a * r;
                out[base + 2 * q + j] = w;
                out[base + 3 * q + j] = a * w;
            }
        }
    }
}

/// Feature vector `m(x, a)` for one covariate row.
pub fn features(layout: &OutcomeLayout, row: &[f64], a: f64) -> Result<DVector<f64>> {
    if row.len() != layout.row_len() {
        return Err(Error::DimensionMismatch { what: "covariate row", expected: layout.row_len(), got: row.len() });
    }
    if row.iter().any(|v| !v.is_finite()) || !a.is_finite() {
        return Err(Error::InvalidData("non-finite feature input".into()));
    }
    let mut out = vec![0.0; layout.dim()];
    layout.fill_features(row, a, &mut out);
    Ok(DVector::from_vec(out))
}

/// `∂Q/∂coef`; for a linear model this is the feature vector itself.
pub fn dq_dbeta(layout: &OutcomeLayout, row: &[f64], d: f64) -> Result<DVector<f64>> {
    features(layout, row, d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeModel {
    pub coef: DVector<f64>,
    pub layout: OutcomeLayout,
}

impl OutcomeModel {
    pub fn new(coef: DVector<f64>, layout: OutcomeLayout) -> Result<Self> {
        if coef.len() != layout.dim() {
            return Err(Error::DimensionMismatch { what: "outcome coefficients", expected: layout.dim(), got: coef.len() });
        }
        Ok(Self { coef, layout })
    }

    pub fn zeros(layout: OutcomeLayout) -> Self {
        Self { coef: DVector::zeros(layout.dim()), layout }
    }

    pub fn design(&self) -> DesignId {
        self.layout.design
    }

    /// `Q(x, a) = coef · m(x, a)`.
    pub fn predict(&self, row: &[f64], a: f64) -> Result<f64> {
        Ok(self.coef.dot(&features(&self.layout, row, a)?))
    }

    /// Predictions for every row of `design`, row `i` at arm `arms[i]`.
    pub fn predict_design(&self, design: &Design, arms: &DVector<f64>) -> DVector<f64> {
        design.outcome_features(arms) * &self.coef
    }

    /// Treatment-contrast coefficients `(coef_a, coef_ax)` on the confounders:
    /// `Q(x, 1) - Q(x, -1) = 2 (coef_a + coef_axᵀ x)`.
    pub fn contrast(&self) -> DVector<f64> {
        let p = self.layout.p;
        let mut c = DVector::zeros(1 + p);
        c[0] = self.coef[1];
        for j in 0..p {
            c[1 + j] = self.coef[2 + p + j];
        }
        c
    }
}

/// Sum of squared residuals at `coef`.
pub fn ols_objective(design: &Design, coef: &DVector<f64>) -> f64 {
    let m = design.outcome_features(design.a());
    (design.y() - m * coef).norm_squared()
}

/// Least squares fit of the outcome on `m(x, A)` at the observed treatments.
pub fn fit_ols(design: &Design) -> Result<OutcomeModel> {
    let m = design.outcome_features(design.a());
    let bad = dependent_columns(&m, 1e-9);
    if !bad.is_empty() {
        return Err(Error::RankDeficient { columns: bad });
    }
    let gram = m.transpose() * &m;
    let rhs = m.transpose() * design.y();
    let coef = solve_spd(&gram, &rhs, OLS_RIDGE).ok_or(Error::Singular("OLS normal equations"))?;
    OutcomeModel::new(coef, design.layout())
}
