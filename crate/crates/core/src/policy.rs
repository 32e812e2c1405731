//! Linear treatment rules `d(x) = sign(ηᵀ x̃)` and direct value search.

use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::design::{Design, DesignId};
use crate::error::{Error, Result};
use crate::missingness::{prepare_design, ImputationScheme};
use crate::outcome::fit_ols;
use crate::seeding::rng_for;
use crate::value::{EstimateOptions, EstimatorKind, ValueEngine};

/// Unit-norm coefficients over `(1, X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRule {
    eta: DVector<f64>,
}

impl LinearRule {
    /// Normalizes `eta`; fails on a zero or non-finite vector.
    pub fn new(eta: DVector<f64>) -> Result<Self> {
        let norm = eta.norm();
        if eta.is_empty() || !norm.is_finite() || norm == 0.0 {
            return Err(Error::InvalidArgument("rule coefficients must be finite and non-zero".into()));
        }
        Ok(Self { eta: eta / norm })
    }

    pub fn eta(&self) -> &DVector<f64> {
        &self.eta
    }

    /// Number of confounders the rule expects.
    pub fn p(&self) -> usize {
        self.eta.len() - 1
    }

    fn score(&self, x_row: impl Iterator<Item = f64>) -> f64 {
        self.eta[0] + x_row.zip(self.eta.iter().skip(1)).map(|(x, e)| x * e).sum::<f64>()
    }

    /// `+1` when `ηᵀ x̃ ≥ 0`, else `−1`.
    pub fn assign(&self, x_row: &[f64]) -> Result<f64> {
        if x_row.len() != self.p() {
            return Err(Error::DimensionMismatch { what: "rule input", expected: self.p(), got: x_row.len() });
        }
        if x_row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite rule input".into()));
        }
        Ok(if self.score(x_row.iter().copied()) >= 0.0 { 1.0 } else { -1.0 })
    }

    /// Assignments for every row of the confounder matrix `x`.
    pub fn assign_all(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.p() {
            return Err(Error::DimensionMismatch { what: "rule input", expected: self.p(), got: x.ncols() });
        }
        Ok(DVector::from_fn(x.nrows(), |i, _| {
            if self.score(x.row(i).iter().copied()) >= 0.0 {
                1.0
            } else {
                -1.0
            }
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSettings {
    pub restarts: usize,
    pub population: usize,
    /// Total candidate evaluations, shared evenly across restarts.
    pub max_evals: usize,
    pub seed: u64,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self { restarts: 20, population: 50, max_evals: 5000, seed: 0 }
    }
}

impl SearchSettings {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.population == 0 || self.max_evals == 0 {
            return Err(Error::InvalidArgument("search restarts, population and max_evals must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub rule: LinearRule,
    /// Training-sample value of `rule`.
    pub value: f64,
    /// Training-sample value of the initial rule.
    pub init_value: f64,
    pub evaluations: usize,
}

/// Normalized treatment contrast `(β_a, β_ax)` of a least squares fit on
/// the confounders: the rule that treats when the fitted contrast is
/// non-negative.
pub fn contrast_rule(ds: &Dataset) -> Result<LinearRule> {
    let om = fit_ols(&Design::from_dataset(ds))?;
    let c = om.contrast();
    if c.norm() > 1e-12 * om.coef.amax().max(1.0) {
        LinearRule::new(c)
    } else {
        let mut e = DVector::zeros(ds.p() + 1);
        e[0] = 1.0;
        LinearRule::new(e)
    }
}

const DE_WEIGHT: f64 = 0.7;
const DE_CROSSOVER: f64 = 0.9;
const LOCAL_SPREAD: f64 = 0.3;
/// Relative gain below which a candidate does not replace the best rule.
const GAIN_TOL: f64 = 1e-12;

struct Objective<'a> {
    engine: ValueEngine<'a>,
    kind: EstimatorKind,
    x: &'a DMatrix<f64>,
    cache: Mutex<HashMap<Vec<u64>, Option<f64>>>,
}

impl Objective<'_> {
    fn value(&self, eta: &DVector<f64>) -> Option<f64> {
        let rule = LinearRule::new(eta.clone()).ok()?;
        let d = rule.assign_all(self.x).ok()?;
        let mut key = vec![0u64; d.len().div_ceil(64)];
        for (i, v) in d.iter().enumerate() {
            if *v == 1.0 {
                key[i / 64] |= 1 << (i % 64);
            }
        }
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return *hit;
        }
        let v = self.engine.evaluate(self.kind, &d, false).ok().map(|e| e.value).filter(|v| v.is_finite());
        self.cache.lock().unwrap().insert(key, v);
        v
    }
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn unit_or_random<R: Rng>(v: DVector<f64>, rng: &mut R) -> DVector<f64> {
    let n = v.norm();
    if n > 1e-12 {
        v / n
    } else {
        random_unit(v.len(), rng)
    }
}

/// Searches the unit sphere for the rule with the largest training value
/// under `kind`, by differential evolution (rand/1/bin) with seeded
/// restarts, started from [`contrast_rule`]. Each restart mixes uniform
/// draws with points near the best rule so far. Only `train` is read.
pub fn optimize_rule(
    train: &Dataset,
    kind: EstimatorKind,
    design_id: DesignId,
    scheme: ImputationScheme,
    options: &EstimateOptions,
    settings: &SearchSettings,
) -> Result<SearchOutcome> {
    settings.validate()?;
    for arm in [1.0, -1.0] {
        if train.a().iter().filter(|&&a| a == arm).count() < 2 {
            return Err(Error::InvalidArgument("rule search needs at least two units per arm".into()));
        }
    }
    let design = prepare_design(train, design_id, scheme)?;
    let objective = Objective {
        engine: ValueEngine::new(&design, *options)?,
        kind,
        x: train.x(),
        cache: Mutex::new(HashMap::new()),
    };
    let init = contrast_rule(train)?;
    let dim = init.eta.len();

    let mut evaluations = 1;
    let init_value = objective.value(&init.eta);
    let mut best: Option<(DVector<f64>, f64)> = init_value.map(|v| (init.eta.clone(), v));
    let per_restart = (settings.max_evals.saturating_sub(1) / settings.restarts).max(1);
    let np = settings.population.max(4);

    let consider = |best: &mut Option<(DVector<f64>, f64)>, eta: &DVector<f64>, v: Option<f64>| {
        if let Some(v) = v {
            if best.as_ref().is_none_or(|(_, b)| v > *b + GAIN_TOL * b.abs().max(1.0)) {
                *best = Some((eta.clone(), v));
            }
        }
    };

    for restart in 0..settings.restarts {
        let mut rng = rng_for(settings.seed, restart as u64);
        let mut budget = per_restart;
        // half of each population is scattered around the incumbent
        let centre = best.as_ref().map_or_else(|| init.eta.clone(), |(eta, _)| eta.clone());
        let mut pop: Vec<DVector<f64>> = (0..np)
            .map(|k| {
                if restart == 0 && k == 0 {
                    init.eta.clone()
                } else if k % 2 == 0 {
                    let step = random_unit(dim, &mut rng) * (LOCAL_SPREAD * rng.random::<f64>());
                    unit_or_random(&centre + step, &mut rng)
                } else {
                    random_unit(dim, &mut rng)
                }
            })
            .collect();
        let take = np.min(budget);
        let mut vals: Vec<Option<f64>> = pop[..take].par_iter().map(|eta| objective.value(eta)).collect();
        vals.resize(np, None);
        budget -= take;
        evaluations += take;
        for (eta, v) in pop.iter().zip(&vals).take(take) {
            consider(&mut best, eta, *v);
        }
        while budget > 0 {
            let trials: Vec<DVector<f64>> = (0..np)
                .map(|k| {
                    let mut pick = || loop {
                        let c = rng.random_range(0..np);
                        if c != k {
                            return c;
                        }
                    };
                    let (r1, mut r2, mut r3) = (pick(), pick(), pick());
                    while r2 == r1 {
                        r2 = pick();
                    }
                    while r3 == r1 || r3 == r2 {
                        r3 = pick();
                    }
                    let mutant = &pop[r1] + (&pop[r2] - &pop[r3]) * DE_WEIGHT;
                    let forced = rng.random_range(0..dim);
                    let mut trial = pop[k].clone();
                    for j in 0..dim {
                        if j == forced || rng.random::<f64>() < DE_CROSSOVER {
                            trial[j] = mutant[j];
                        }
                    }
                    unit_or_random(trial, &mut rng)
                })
                .collect();
            let take = np.min(budget);
            let trial_vals: Vec<Option<f64>> = trials[..take].par_iter().map(|eta| objective.value(eta)).collect();
            budget -= take;
            evaluations += take;
            for (k, v) in trial_vals.into_iter().enumerate() {
                consider(&mut best, &trials[k], v);
                let better = match (v, vals[k]) {
                    (Some(t), Some(c)) => t > c,
                    (Some(_), None) => true,
                    _ => false,
                };
                if better {
                    pop[k] = trials[k].clone();
                    vals[k] = v;
                }
            }
        }
    }

    let (eta, value) = best.ok_or(Error::SearchFailed)?;
    Ok(SearchOutcome { rule: LinearRule::new(eta)?, value, init_value: init_value.unwrap_or(f64::NEG_INFINITY), evaluations })
}
