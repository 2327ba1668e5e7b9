mod common;

use common::*;
use proptest::prelude::*;
use versioncausal::glm::{
    fit_multinomial_logit, logit_grad_hess, one_hot, LogitOptions, SoftLabelProblem,
};

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = rng(101);
    for case in 0..20 {
        let (m, d, k) = (30 + 7 * case, 1 + case % 4, 2 + case % 3);
        let design = random_design(&mut rng, m, d);
        let weights = random_targets(&mut rng, m, k, case % 2 == 0);
        let problem = SoftLabelProblem::new(&design, d, &weights, k).unwrap();
        let coefs = random_coefficients(&mut rng, k, d, 0.7);
        let (grad, _) = logit_grad_hess(&problem, &coefs, 1e-3).unwrap();
        let fd = finite_difference_gradient(&problem, &coefs, 1e-3, 1e-5);
        for (g, f) in grad.iter().zip(&fd) {
            assert!((g - f).abs() <= 1e-6 * g.abs().max(f.abs()).max(1.0), "case {case}: {g} vs {f}");
        }
    }
}

#[test]
fn zero_gradient_for_balanced_intercept_problem() {
    let design = vec![1.0; 4];
    let weights = one_hot(&[0, 1, 0, 1], 2).unwrap();
    let problem = SoftLabelProblem::new(&design, 1, &weights, 2).unwrap();
    let (grad, hess) = logit_grad_hess(&problem, &[vec![0.0], vec![0.0]], 0.0).unwrap();
    assert_eq!(grad, vec![0.0]);
    assert!((hess[(0, 0)] + 1.0).abs() < 1e-15);
}

#[test]
fn fitted_gradient_is_small_and_trace_monotone() {
    let mut rng = rng(7);
    for case in 0..10 {
        let (m, d, k) = (200, 3, 2 + case % 3);
        let design = random_design(&mut rng, m, d);
        let weights = random_targets(&mut rng, m, k, false);
        let problem = SoftLabelProblem::new(&design, d, &weights, k).unwrap();
        let fit = fit_multinomial_logit(&problem, &LogitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.coefficients[0].iter().all(|&c| c == 0.0));
        let (grad, _) = logit_grad_hess(&problem, &fit.coefficients, LogitOptions::default().ridge).unwrap();
        assert!(max_abs(&grad) < 1e-6 * m as f64);
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10, "{} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn hard_labels_equal_one_hot_soft_labels() {
    let mut rng = rng(9);
    let labels: Vec<usize> = (0..120).map(|i| if i < 3 { i } else { rand::Rng::random_range(&mut rng, 0..3) }).collect();
    let design = random_design(&mut rng, 120, 3);
    let hard = one_hot(&labels, 3).unwrap();
    let soft: Vec<f64> = labels
        .iter()
        .flat_map(|&l| (0..3).map(move |c| if c == l { 1.0 } else { 0.0 }))
        .collect();
    let a = fit_multinomial_logit(&SoftLabelProblem::new(&design, 3, &hard, 3).unwrap(), &LogitOptions::default()).unwrap();
    let b = fit_multinomial_logit(&SoftLabelProblem::new(&design, 3, &soft, 3).unwrap(), &LogitOptions::default()).unwrap();
    for (x, y) in a.coefficients.iter().flatten().zip(b.coefficients.iter().flatten()) {
        assert!((x - y).abs() < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn row_order_does_not_matter(seed in 0u64..1000, shift in 1usize..50) {
        let mut rng = rng(seed);
        let (m, d, k) = (60, 2, 3);
        let design = random_design(&mut rng, m, d);
        let weights = random_targets(&mut rng, m, k, false);
        let rotate = |v: &[f64], width: usize| {
            let mut out = v[shift * width..].to_vec();
            out.extend_from_slice(&v[..shift * width]);
            out
        };
        let design2 = rotate(&design, d);
        let weights2 = rotate(&weights, k);
        let opts = LogitOptions::default();
        let a = fit_multinomial_logit(&SoftLabelProblem::new(&design, d, &weights, k).unwrap(), &opts).unwrap();
        let b = fit_multinomial_logit(&SoftLabelProblem::new(&design2, d, &weights2, k).unwrap(), &opts).unwrap();
        for (x, y) in a.coefficients.iter().flatten().zip(b.coefficients.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
