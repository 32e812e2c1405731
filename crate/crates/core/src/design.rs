//! Estimation view over a dataset: the intercept-augmented covariate matrix
//! for one adjustment set, together with treatment and outcome.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{AugmentedDataset, Dataset};
use crate::outcome::OutcomeLayout;

/// Which adjustment set the nuisance models use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignId {
    /// Confounders only.
    X,
    /// Confounders, imputed predictive covariates and their masks.
    XDagger,
}

impl DesignId {
    pub fn label(self) -> &'static str {
        match self {
            DesignId::X => "x",
            DesignId::XDagger => "xdagger",
        }
    }
}

impl std::str::FromStr for DesignId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(DesignId::X),
            "xdagger" | "xdag" | "x+" => Ok(DesignId::XDagger),
            other => Err(format!("unknown design `{other}` (expected x or xdagger)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Design {
    id: DesignId,
    p: usize,
    q: usize,
    /// n × (1 + m): intercept, then X or [X | W̃ | R].
    xt: DMatrix<f64>,
    a: DVector<f64>,
    y: DVector<f64>,
}

fn with_intercept(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cov.nrows();
    let mut xt = DMatrix::from_element(n, cov.ncols() + 1, 1.0);
    xt.columns_mut(1, cov.ncols()).copy_from(cov);
    xt
}

impl Design {
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self {
            id: DesignId::X,
            p: ds.p(),
            q: 0,
            xt: with_intercept(ds.x()),
            a: ds.a().clone(),
            y: ds.y().clone(),
        }
    }

    pub fn from_augmented(aug: &AugmentedDataset) -> Self {
        let base = aug.base();
        Self {
            id: DesignId::XDagger,
            p: base.p(),
            q: base.q(),
            xt: with_intercept(aug.columns()),
            a: base.a().clone(),
            y: base.y().clone(),
        }
    }

    pub fn id(&self) -> DesignId {
        self.id
    }

    pub fn n(&self) -> usize {
        self.xt.nrows()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Intercept-augmented covariates used by the propensity model.
    pub fn xt(&self) -> &DMatrix<f64> {
        &self.xt
    }

    pub fn a(&self) -> &DVector<f64> {
        &self.a
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// Confounder columns only (the rule is always a function of X).
    pub fn confounders(&self) -> DMatrix<f64> {
        self.xt.columns(1, self.p).into_owned()
    }

    pub fn alpha_dim(&self) -> usize {
        self.xt.ncols()
    }

    pub fn layout(&self) -> OutcomeLayout {
        OutcomeLayout { design: self.id, p: self.p, q: self.q }
    }

    /// Outcome feature matrix with row `i` evaluated at treatment `arms[i]`.
    pub fn outcome_features(&self, arms: &DVector<f64>) -> DMatrix<f64> {
        let layout = self.layout();
        let k = layout.dim();
        let mut m = DMatrix::zeros(self.n(), k);
        let cov_cols = self.xt.ncols() - 1;
        let mut row = vec![0.0; cov_cols];
        let mut buf = vec![0.0; k];
        for i in 0..self.n() {
            for j in 0..cov_cols {
                row[j] = self.xt[(i, j + 1)];
            }
            layout.fill_features(&row, arms[i], &mut buf);
            for j in 0..k {
                m[(i, j)] = buf[j];
            }
        }
        m
    }

    /// Copy with a different outcome vector (testing and sensitivity checks).
    pub fn with_outcome(&self, y: DVector<f64>) -> Self {
        Self { y, ..self.clone() }
    }

    /// `I(A = d)` per row.
    pub fn agreement(&self, d: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n(), |i, _| if self.a[i] == d[i] { 1.0 } else { 0.0 })
    }
}
