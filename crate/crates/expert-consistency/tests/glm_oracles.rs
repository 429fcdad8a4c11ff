use expert_consistency::calibration::SigmoidCalibrator;
use expert_consistency::evaluation::auc;
use expert_consistency::glm::{
    condition_number, ensure_invertible_fit, fit, objective, risk_gradient, risk_hessian,
    FitOptions, WeightedLogisticModel,
};
use expert_consistency::oracles::minimize_convex;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tight() -> FitOptions {
    FitOptions {
        tol: 1e-12,
        max_iter: 200,
    }
}

#[test]
fn four_point_fit_matches_generic_minimizer() {
    let x = DMatrix::from_column_slice(4, 1, &[-1.5, -0.2, 0.4, 2.0]);
    let y = [0.0, 1.0, 0.0, 1.0];
    let w = [1.0; 4];
    let ridge = 1e-2;
    let model = fit(&x, &y, &w, ridge, &tight()).unwrap();
    let f = |t: &[f64]| objective(t, &x, &y, &w, ridge);
    let oracle = minimize_convex(&f, &[0.0, 0.0], 1e-12).unwrap();
    for (a, b) in model.theta.iter().zip(&oracle.point) {
        assert!((a - b).abs() < 1e-6, "newton {a} vs oracle {b}");
    }
}

#[test]
fn duplicated_wide_column_escalates_the_ridge() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 400;
    let col: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1000.0)).collect();
    let x = DMatrix::from_fn(n, 2, |i, _| col[i]);
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
    let w = vec![1.0; n];
    let (model, used) = ensure_invertible_fit(&x, &y, &w, &FitOptions::default()).unwrap();
    assert!(used > 1e-3, "ridge stayed at {used}");
    let at_used = condition_number(&risk_hessian(&model.theta, &x, &y, &w, used).unwrap());
    assert!(at_used < 1e10);
    let first = fit(&x, &y, &w, 1e-3, &FitOptions::default()).unwrap();
    let at_first = condition_number(&risk_hessian(&first.theta, &x, &y, &w, 1e-3).unwrap());
    assert!(at_first >= 1e10, "condition at 1e-3 was {at_first:e}");
}

#[test]
fn full_rank_standardized_data_keeps_the_first_ridge() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 300;
    let x = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
    let y: Vec<f64> = (0..n)
        .map(|i| ((x[(i, 0)] - x[(i, 1)] + rng.random_range(-1.0..1.0)) > 0.0) as u8 as f64)
        .collect();
    let (_, used) = ensure_invertible_fit(&x, &y, &vec![1.0; n], &FitOptions::default()).unwrap();
    assert_eq!(used, 1e-3);
}

fn instance(seed: u64, n: usize, m: usize) -> (DMatrix<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, m, |_, _| rng.random_range(-2.0..2.0));
    let y = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
    let w = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
    let theta = (0..=m).map(|_| rng.random_range(-1.0..1.0)).collect();
    (x, y, w, theta)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>(), n in 1usize..30, m in 1usize..4, ridge in 0.0f64..2.0) {
        let (x, y, w, theta) = instance(seed, n, m);
        let g = risk_gradient(&theta, &x, &y, &w, ridge).unwrap();
        for j in 0..theta.len() {
            let h = 1e-5;
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (objective(&up, &x, &y, &w, ridge) - objective(&dn, &x, &y, &w, ridge)) / (2.0 * h);
            prop_assert!((g[j] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "coord {}: {} vs {}", j, g[j], fd);
        }
    }

    #[test]
    fn hessian_matches_gradient_differences(seed in any::<u64>(), n in 1usize..30, m in 1usize..4, ridge in 0.0f64..2.0) {
        let (x, y, w, theta) = instance(seed, n, m);
        let hess = risk_hessian(&theta, &x, &y, &w, ridge).unwrap();
        for j in 0..theta.len() {
            let h = 1e-5;
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += h;
            dn[j] -= h;
            let gu = risk_gradient(&up, &x, &y, &w, ridge).unwrap();
            let gd = risk_gradient(&dn, &x, &y, &w, ridge).unwrap();
            for i in 0..theta.len() {
                let fd = (gu[i] - gd[i]) / (2.0 * h);
                prop_assert!((hess[(i, j)] - fd).abs() <= 1e-5 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn penalized_block_eigenvalues_stay_above_the_ridge(seed in any::<u64>(), n in 1usize..30, m in 1usize..4, ridge in 0.01f64..2.0) {
        let (x, y, w, theta) = instance(seed, n, m);
        let hess = risk_hessian(&theta, &x, &y, &w, ridge).unwrap();
        let block = hess.view((0, 0), (m, m)).into_owned();
        let min = block.symmetric_eigenvalues().min();
        prop_assert!(min >= ridge * (1.0 - 1e-12));
    }

    #[test]
    fn probabilities_stay_inside_the_unit_interval(theta in prop::collection::vec(-1e4f64..1e4, 3), x in prop::collection::vec(-1e4f64..1e4, 2)) {
        let model = WeightedLogisticModel { theta, ridge: 0.0, grad_norm_at_opt: 0.0, feature_count: 2 };
        let calibrated = expert_consistency::calibration::CalibratedDecisionModel::uncalibrated(model);
        let p = calibrated.predict_proba(&x).unwrap();
        prop_assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn monotone_calibration_keeps_or_reverses_auc(seed in any::<u64>(), a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0], b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 60;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let cal = SigmoidCalibrator { slope_a: a, offset_b: b };
        let mapped: Vec<f64> = scores.iter().map(|&s| cal.apply(s)).collect();
        let before = auc(&scores, &labels).unwrap();
        let after = auc(&mapped, &labels).unwrap();
        let expected = if a < 0.0 { before } else { 1.0 - before };
        prop_assert!((after - expected).abs() < 1e-12, "{} vs {}", after, expected);
    }
}
