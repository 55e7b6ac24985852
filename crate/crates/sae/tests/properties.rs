//! Property tests for the model invariants: fuzzed datasets and parameters
//! rather than fixed fixtures.

use proptest::prelude::*;

use sae::{
    blup, c_from_factor, estimate_variance, factor_from_c, factor_yl, g_terms, mse_estimate,
    residual_quadratic, AreaObservation, CWeight, Dataset, EstimateOptions, LikelihoodKind,
    MseForm, VarianceFit, VarianceMethod,
};

/// Strategy: a valid dataset with intercept plus one optional covariate.
fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (3usize..12, any::<bool>()).prop_flat_map(|(m, two_cols)| {
        let area = (
            -50.0f64..50.0,
            0.1f64..10.0,
            proptest::option::of(-3.0f64..3.0),
        );
        proptest::collection::vec(area, m).prop_map(move |rows| {
            let areas = rows
                .into_iter()
                .enumerate()
                .map(|(i, (y, d, x2))| {
                    let mut x = vec![1.0];
                    if two_cols {
                        // Tie the second column to the row index so the
                        // design never collapses to rank 1.
                        x.push(x2.unwrap_or(0.0) + i as f64 * 0.25);
                    }
                    AreaObservation::new(format!("a{i}"), y, d, x)
                })
                .collect();
            Dataset::validate(areas).expect("strategy builds valid datasets")
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residual_quadratic_is_nonnegative(data in dataset_strategy(), a in 0.0f64..100.0) {
        let q = residual_quadratic(a, &data).unwrap();
        prop_assert!(q >= 0.0);
    }

    #[test]
    fn predictions_are_convex_combinations(data in dataset_strategy(), a in 0.0f64..1000.0) {
        let r = blup(&data, a).unwrap();
        for i in 0..data.m() {
            let y = data.area(i).y;
            let synthetic: f64 = data.area(i).x.iter().zip(&r.beta_hat[i]).map(|(x, b)| x * b).sum();
            let (lo, hi) = (y.min(synthetic), y.max(synthetic));
            prop_assert!(r.theta_hat[i] >= lo - 1e-9 && r.theta_hat[i] <= hi + 1e-9);
            prop_assert!(r.b_hat[i] > 0.0 && r.b_hat[i] <= 1.0);
        }
    }

    #[test]
    fn residual_likelihood_is_translation_invariant(
        data in dataset_strategy(),
        a in 0.0f64..50.0,
        shift in -20.0f64..20.0,
    ) {
        let l0 = sae::log_likelihood(LikelihoodKind::ResidualML, a, &data).unwrap();
        let shifted: Vec<f64> = data.areas().iter().map(|o| o.y + shift * o.x[0]).collect();
        let d2 = data.with_responses(&shifted).unwrap();
        let l1 = sae::log_likelihood(LikelihoodKind::ResidualML, a, &d2).unwrap();
        prop_assert!((l0 - l1).abs() < 1e-8 * (1.0 + l0.abs()));
    }

    #[test]
    fn adjusted_estimators_stay_positive(data in dataset_strategy()) {
        // Positivity needs m > p + 4 for the per-area estimator; LL/YL hold
        // everywhere.
        for method in [VarianceMethod::AdjustedLL, VarianceMethod::AdjustedYL] {
            let est = estimate_variance(&data, method, &EstimateOptions::default()).unwrap();
            prop_assert!(est.a_hat > 0.0);
        }
        if data.m() > data.p() + 4 {
            let est = estimate_variance(
                &data,
                VarianceMethod::Nre { area: 0 },
                &EstimateOptions::default(),
            )
            .unwrap();
            prop_assert!(est.a_hat > 0.0);
        }
    }

    #[test]
    fn mse_estimates_are_positive_and_ordered(data in dataset_strategy(), a in 0.0f64..40.0) {
        let est = sae::VarianceEstimate {
            a_hat: a,
            method: VarianceMethod::Reml,
            at_lower_boundary: a == 0.0,
            at_upper_boundary: false,
            objective_at_max: 0.0,
            evaluations: 0,
            a_max: 1e4,
        };
        let fit = VarianceFit::Pooled(est);
        let naive = mse_estimate(&data, &MseForm::NaivePlugin, &fit).unwrap();
        let dl = mse_estimate(&data, &MseForm::DattaLahiri, &fit).unwrap();
        for i in 0..data.m() {
            prop_assert!(naive.values[i] > 0.0);
            let g = g_terms(a, &data, i).unwrap();
            prop_assert_eq!(dl.values[i], naive.values[i] + 2.0 * g.g3);
        }
    }

    #[test]
    fn weight_round_trip_on_fuzzed_constants(
        c in 0.0f64..=2.0,
        d_i in 0.1f64..5.0,
        a in 0.01f64..100.0,
    ) {
        let template = Dataset::validate(
            (0..8)
                .map(|i| AreaObservation::new(format!("a{i}"), 0.0, d_i, vec![1.0]))
                .collect(),
        )
        .unwrap();
        let yl = factor_yl(&template);
        let f = factor_from_c(&CWeight::Constant(c), d_i, &yl).unwrap();
        let back = c_from_factor(&f, d_i, a).unwrap();
        prop_assert!((back - c).abs() < 1e-4, "c = {c}, back = {back}");
    }
}
