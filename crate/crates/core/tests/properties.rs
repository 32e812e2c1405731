use cbdr::dataset::{augment, load_csv, split_indices, Predictive};
use cbdr::missingness::{impute, prepare_design};
use cbdr::outcome::{fit_ols, ols_objective};
use cbdr::policy::{contrast_rule, optimize_rule};
use cbdr::propensity::{fit_cbps, fit_mle};
use cbdr::simulation::{generate, summarize, DesignVariant, Scenario, Truth};
use cbdr::value::{
    aipw_value, beta_opt, gamma_matrix, influence_phi, sigma_hat, BetaConstraint, EstimateOptions, EstimatorKind,
};
use cbdr::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sim(n: usize, seed: u64, ps: Truth, outcome: Truth) -> Dataset {
    generate(n, ps, outcome, (1.0, 1.0), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn schemes() -> impl Strategy<Value = ImputationScheme> {
    prop_oneof![
        Just(ImputationScheme::Zero),
        Just(ImputationScheme::Median),
        Just(ImputationScheme::LinearModel),
        Just(ImputationScheme::InteractionModel),
    ]
}

fn designs() -> impl Strategy<Value = DesignId> {
    prop_oneof![Just(DesignId::X), Just(DesignId::XDagger)]
}

fn rule_of(ds: &Dataset, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eta = DVector::from_fn(ds.p() + 1, |_, _| rng.random_range(-1.0..1.0));
    LinearRule::new(eta).unwrap().assign_all(ds.x()).unwrap()
}

/// Field-wise bit equality; unobserved predictive cells are NaN.
fn same_bits(a: &Dataset, b: &Dataset) -> bool {
    let bits = |m: &[f64]| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let pred = |d: &Dataset| d.predictive().map(|p| (bits(p.w.as_slice()), bits(p.r.as_slice())));
    bits(a.x().as_slice()) == bits(b.x().as_slice())
        && a.a() == b.a()
        && bits(a.y().as_slice()) == bits(b.y().as_slice())
        && pred(a) == pred(b)
        && a.names() == b.names()
}

fn schema() -> Schema {
    Schema {
        treatment: "A".into(),
        outcome: "Y".into(),
        confounders: vec!["X1".into(), "X2".into()],
        predictive: vec!["W1".into(), "W2".into()],
    }
}

/// Central difference of a scalar function of `alpha`.
fn central_diff(f: impl Fn(&DVector<f64>) -> f64, alpha: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(alpha.len(), |k, _| {
        let mut up = alpha.clone();
        let mut dn = alpha.clone();
        up[k] += h;
        dn[k] -= h;
        (f(&up) - f(&dn)) / (2.0 * h)
    })
}

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn csv_round_trip_is_exact(seed in any::<u64>(), n in 5usize..60, scale in -30i32..30) {
        let base = sim(n, seed, Truth::Lin, Truth::Nonlin);
        let f = 2f64.powi(scale) / 3.0;
        let ds = base.with_outcome(base.y() * f).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write_csv(&path).unwrap();
        let back = load_csv(&path, &schema()).unwrap();
        prop_assert_eq!(back.x(), ds.x());
        prop_assert_eq!(back.a(), ds.a());
        prop_assert_eq!(back.y(), ds.y());
        let (p0, p1) = (ds.predictive().unwrap(), back.predictive().unwrap());
        prop_assert_eq!(&p0.r, &p1.r);
        for (u, v) in p0.w.iter().zip(p1.w.iter()) {
            prop_assert!(u.to_bits() == v.to_bits() || (u.is_nan() && v.is_nan()));
        }
    }

    #[test]
    fn split_is_a_partition(n in 2usize..500, fraction in 0.01f64..0.99, seed in any::<u64>()) {
        let (train, test) = split_indices(n, &SplitSpec { train_fraction: fraction, seed }).unwrap();
        prop_assert!(!train.is_empty() && !test.is_empty());
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn augment_and_impute_leave_the_input_alone(seed in any::<u64>(), n in 20usize..120, scheme in schemes()) {
        let ds = sim(n, seed, Truth::Nonlin, Truth::Lin);
        let copy = ds.clone();
        let wt = impute(&ds, scheme).unwrap();
        let _ = augment(&ds, &wt).unwrap();
        prop_assert!(same_bits(&ds, &copy));
    }

    #[test]
    fn imputation_keeps_observed_cells_and_ignores_treatment_and_outcome(
        seed in any::<u64>(),
        n in 20usize..150,
        scheme in schemes(),
    ) {
        let ds = sim(n, seed, Truth::Lin, Truth::Lin);
        let wt = impute(&ds, scheme).unwrap();
        let Predictive { w, r } = ds.predictive().unwrap().clone();
        for i in 0..n {
            for j in 0..w.ncols() {
                if r[(i, j)] == 1.0 {
                    prop_assert_eq!(wt[(i, j)], w[(i, j)]);
                } else {
                    prop_assert!(wt[(i, j)].is_finite());
                }
            }
        }
        prop_assert_eq!(&impute(&ds, scheme).unwrap(), &wt);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let other = ds
            .with_outcome(DVector::from_fn(n, |_, _| rng.random_range(-50.0..50.0)))
            .unwrap()
            .with_treatment(DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 }))
            .unwrap();
        prop_assert_eq!(&impute(&other, scheme).unwrap(), &wt);
    }

    #[test]
    fn arm_probabilities_stay_inside_the_positivity_guard(
        alpha in proptest::collection::vec(-80.0f64..80.0, 3),
        seed in any::<u64>(),
    ) {
        let ds = sim(50, seed, Truth::Lin, Truth::Lin);
        let design = Design::from_dataset(&ds);
        let ps = PropensityModel::new(DVector::from_vec(alpha), DesignId::X, FitMethod::Mle);
        for arms in [DVector::from_element(50, 1.0), DVector::from_element(50, -1.0)] {
            for p in ps.arm_probs(&design, &arms).iter() {
                prop_assert!((PROB_EPS..=1.0 - PROB_EPS).contains(p));
            }
        }
    }

    #[test]
    fn scale_invariant_assignment(eta in proptest::collection::vec(-5.0f64..5.0, 3), c in 1e-3f64..1e3, seed in any::<u64>()) {
        prop_assume!(eta.iter().any(|v| v.abs() > 1e-6));
        let ds = sim(80, seed, Truth::Lin, Truth::Lin);
        let a = LinearRule::new(DVector::from_vec(eta.clone())).unwrap();
        let b = LinearRule::new(DVector::from_vec(eta) * c).unwrap();
        prop_assert_eq!(a.assign_all(ds.x()).unwrap(), b.assign_all(ds.x()).unwrap());
    }

    #[test]
    fn ols_fit_beats_perturbations_and_is_affine_in_treatment(seed in any::<u64>(), design_id in designs()) {
        let ds = sim(150, seed, Truth::Lin, Truth::Nonlin);
        let design = prepare_design(&ds, design_id, ImputationScheme::Median).unwrap();
        let om = fit_ols(&design).unwrap();
        let best = ols_objective(&design, &om.coef);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let step = DVector::from_fn(om.coef.len(), |_, _| rng.random_range(-0.1..0.1));
            prop_assert!(best <= ols_objective(&design, &(&om.coef + step)) * (1.0 + 1e-12));
        }
        let rows = design.xt().columns(1, design.xt().ncols() - 1).into_owned();
        for i in 0..10 {
            let row: Vec<f64> = rows.row(i).iter().copied().collect();
            let sum = om.predict(&row, 1.0).unwrap() + om.predict(&row, -1.0).unwrap();
            let main = om.predict(&row, 0.0).unwrap();
            prop_assert!((sum - 2.0 * main).abs() <= 1e-9 * main.abs().max(1.0));
        }
    }

    #[test]
    fn fits_are_deterministic(seed in any::<u64>(), design_id in designs()) {
        let ds = sim(200, seed, Truth::Lin, Truth::Lin);
        let design = prepare_design(&ds, design_id, ImputationScheme::Zero).unwrap();
        let d = rule_of(&ds, seed);
        let settings = GmmSettings::default();
        prop_assert_eq!(fit_mle(&design, &settings).unwrap(), fit_mle(&design, &settings).unwrap());
        let a = fit_cbps(&design, &d, BalanceFunction::Moments(2), None, &settings, None);
        let b = fit_cbps(&design, &d, BalanceFunction::Moments(2), None, &settings, None);
        prop_assert_eq!(a.ok(), b.ok());
    }

    #[test]
    fn second_gmm_stage_does_not_raise_its_objective(seed in any::<u64>()) {
        let ds = sim(300, seed, Truth::Lin, Truth::Lin);
        let design = Design::from_dataset(&ds);
        let d = DVector::from_element(ds.n(), 1.0);
        let ps = fit_cbps(&design, &d, BalanceFunction::Moments(2), None, &GmmSettings::default(), None).unwrap();
        let g = ps.gmm.unwrap();
        prop_assert!(g.objective <= g.stage2_start_objective * (1.0 + 1e-9) + 1e-14);
    }

    #[test]
    fn variance_minimizing_coefficients_never_lose_to_least_squares(seed in any::<u64>(), design_id in designs()) {
        let ds = sim(400, seed, Truth::Lin, Truth::Nonlin);
        let design = prepare_design(&ds, design_id, ImputationScheme::Median).unwrap();
        let d = rule_of(&ds, seed);
        let ols = fit_ols(&design).unwrap();
        let ps = fit_cbps(&design, &d, BalanceFunction::Moments(2), None, &GmmSettings::default(), None).unwrap();
        let options = EstimateOptions::default();
        let (opt, _) = beta_opt(&design, &d, &ps, &ols, BetaConstraint::Unconstrained, &options).unwrap();
        let s_opt = sigma_hat(&design, &d, &ps, &opt).unwrap();
        let s_ols = sigma_hat(&design, &d, &ps, &ols).unwrap();
        prop_assert!(s_opt <= s_ols * (1.0 + 1e-10), "{} > {}", s_opt, s_ols);
    }

    #[test]
    fn influence_forms_agree(seed in any::<u64>(), design_id in designs()) {
        let ds = sim(120, seed, Truth::Nonlin, Truth::Nonlin);
        let design = prepare_design(&ds, design_id, ImputationScheme::LinearModel).unwrap();
        let d = rule_of(&ds, seed);
        let ps = fit_mle(&design, &GmmSettings::default()).unwrap();
        let om = fit_ols(&design).unwrap();
        let v = aipw_value(&design, &d, &ps, &om).unwrap();
        let phi = influence_phi(&design, &d, &ps, &om, v).unwrap();
        let ind = design.agreement(&d);
        let pd = ps.arm_probs(&design, &d);
        let q = om.predict_design(&design, &d);
        for i in 0..design.n() {
            let short = ind[i] * (design.y()[i] - q[i]) / pd[i] + q[i] - v;
            prop_assert!((short - phi[i]).abs() <= 1e-10 * short.abs().max(1.0));
        }
    }

    #[test]
    fn sigma_hat_ignores_an_outcome_shift(seed in any::<u64>(), shift in -100.0f64..100.0) {
        let ds = sim(200, seed, Truth::Lin, Truth::Lin);
        let design = Design::from_dataset(&ds);
        let shifted = design.with_outcome(design.y().add_scalar(shift));
        let d = rule_of(&ds, seed);
        let ps = fit_mle(&design, &GmmSettings::default()).unwrap();
        let s0 = sigma_hat(&design, &d, &ps, &fit_ols(&design).unwrap()).unwrap();
        let s1 = sigma_hat(&shifted, &d, &ps, &fit_ols(&shifted).unwrap()).unwrap();
        prop_assert!((s0 - s1).abs() <= 1e-7 * s0);
    }

    #[test]
    fn summary_is_order_invariant_and_rmse_decomposes(
        values in proptest::collection::vec(-50.0f64..50.0, 2..60),
        truth in -20.0f64..20.0,
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let sigmas: Vec<f64> = values.iter().map(|v| v.abs() + 1.0).collect();
        let row = summarize(Scenario::CC, EstimatorKind::Udr, DesignVariant::X, truth, &values, &sigmas);
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pv: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        let ps: Vec<f64> = idx.iter().map(|&i| sigmas[i]).collect();
        let perm = summarize(Scenario::CC, EstimatorKind::Udr, DesignVariant::X, truth, &pv, &ps);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
        prop_assert!(close(row.bias, perm.bias) && close(row.se, perm.se) && close(row.rmse, perm.rmse));
        prop_assert!(close(row.mean_sigma_hat, perm.mean_sigma_hat));
        let m = values.len() as f64;
        let decomposed = row.bias * row.bias + row.se * row.se * (m - 1.0) / m;
        prop_assert!(close(row.rmse * row.rmse, decomposed));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn score_and_propensity_derivatives_match_central_differences(
        alpha in proptest::collection::vec(-2.0f64..2.0, 5),
        row in proptest::collection::vec(-2.0f64..2.0, 4),
        arm in prop_oneof![Just(1.0f64), Just(-1.0f64)],
    ) {
        let alpha = DVector::from_vec(alpha);
        let model = |a: &DVector<f64>| PropensityModel::new(a.clone(), DesignId::XDagger, FitMethod::Mle);
        let analytic = model(&alpha).dpi_dalpha(&row, arm).unwrap();
        let numeric = central_diff(|a| model(a).pi(&row, arm).unwrap(), &alpha, 1e-5);
        prop_assert!(rel_err(&numeric, &analytic) < 1e-6, "dpi {}", rel_err(&numeric, &analytic));
        let score = model(&alpha).score_alpha(&row, arm).unwrap();
        let loglik = |a: &DVector<f64>| {
            let p = model(a).pi(&row, arm).unwrap();
            p.ln()
        };
        let numeric = central_diff(loglik, &alpha, 1e-5);
        prop_assert!(rel_err(&numeric, &score) < 1e-6, "score {}", rel_err(&numeric, &score));
    }

    #[test]
    fn gamma_is_minus_the_value_gradient(seed in any::<u64>(), design_id in designs()) {
        let ds = sim(60, seed, Truth::Lin, Truth::Nonlin);
        let design = prepare_design(&ds, design_id, ImputationScheme::Zero).unwrap();
        let d = rule_of(&ds, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha = DVector::from_fn(design.alpha_dim(), |_, _| rng.random_range(-0.5..0.5));
        let om = OutcomeModel::new(DVector::from_fn(design.layout().dim(), |_, _| rng.random_range(-3.0..3.0)), design.layout()).unwrap();
        let model = |a: &DVector<f64>| PropensityModel::new(a.clone(), design_id, FitMethod::Mle);
        let gamma = gamma_matrix(&design, &d, &model(&alpha), &om).unwrap();
        let numeric = central_diff(|a| -aipw_value(&design, &d, &model(a), &om).unwrap(), &alpha, 1e-5);
        prop_assert!(rel_err(&numeric, &gamma) < 1e-6, "{}", rel_err(&numeric, &gamma));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn search_never_ends_below_its_starting_rule(seed in any::<u64>(), kind_ix in 0usize..4, design_id in designs()) {
        let kind = EstimatorKind::ALL[kind_ix];
        let ds = sim(200, seed, Truth::Lin, Truth::Lin);
        let settings = SearchSettings { restarts: 2, population: 10, max_evals: 60, seed };
        let found = optimize_rule(&ds, kind, design_id, ImputationScheme::Median, &EstimateOptions::default(), &settings).unwrap();
        prop_assert!(found.value >= found.init_value);
        prop_assert!((found.rule.eta().norm() - 1.0).abs() < 1e-12);

        let design = prepare_design(&ds, design_id, ImputationScheme::Median).unwrap();
        let d0 = contrast_rule(&ds).unwrap().assign_all(ds.x()).unwrap();
        let direct = value::estimate(kind, &design, &d0, &EstimateOptions::default()).unwrap().value;
        prop_assert!((direct - found.init_value).abs() <= 1e-9 * direct.abs().max(1.0));
    }
}

#[test]
fn search_with_constant_outcome_returns_the_starting_rule() {
    let base = sim(150, 3, Truth::Lin, Truth::Lin);
    let ds = base.with_outcome(DVector::from_element(150, 4.0)).unwrap();
    let settings = SearchSettings { restarts: 2, population: 8, max_evals: 40, seed: 1 };
    let found = optimize_rule(&ds, EstimatorKind::Udr, DesignId::X, ImputationScheme::Zero, &EstimateOptions::default(), &settings)
        .unwrap();
    assert_eq!(found.rule, contrast_rule(&ds).unwrap());
    assert!((found.value - 4.0).abs() < 1e-9);
}

#[test]
fn search_is_deterministic_and_reads_only_its_argument() {
    let ds = sim(200, 8, Truth::Nonlin, Truth::Lin);
    let copy = ds.clone();
    let settings = SearchSettings { restarts: 2, population: 10, max_evals: 50, seed: 4 };
    let run = || optimize_rule(&ds, EstimatorKind::Cbdr, DesignId::XDagger, ImputationScheme::Median, &EstimateOptions::default(), &settings).unwrap();
    assert_eq!(run(), run());
    assert!(same_bits(&ds, &copy));
}

#[test]
fn exact_interpolation_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 40;
    let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
    let a = DVector::from_fn(n, |i, _| if i % 3 == 0 { 1.0 } else { -1.0 });
    let truth = DVector::from_vec(vec![1.5, -0.5, 2.0, -1.0, 0.25, 3.0]);
    let ds0 = Dataset::new(x, a, DVector::zeros(n), None).unwrap();
    let m = Design::from_dataset(&ds0).outcome_features(ds0.a());
    let ds = ds0.with_outcome(&m * &truth).unwrap();
    let om = fit_ols(&Design::from_dataset(&ds)).unwrap();
    assert!((&om.coef - &truth).amax() < 1e-8);
}
