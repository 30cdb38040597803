mod common;

use common::oracles::{grid_search_minimum, hard_targets, noisy_instance};
use lcx::latent::{
    check_lambdas, fit_direction, latent_predict, regularized_gradient, regularized_loss, shifted_latent,
    LatentDataset, LatentDirection, StepMode,
};
use lcx::{LatentVector, LcxError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn newton_fit_matches_grid_search_on_tiny_instances() {
    let mut checked = 0;
    for seed in 0..6u64 {
        let d = 1 + (seed as usize % 2);
        let n = 12 + seed as usize;
        let ds = noisy_instance(seed, n, d);
        for &l2 in &[1.0 / n as f64, 0.5] {
            let fit = fit_direction(&ds, l2).unwrap();
            let y = hard_targets(&ds);
            let fitted = regularized_loss(&ds.latents, &y, &fit.alpha, fit.beta, l2);
            let oracle = grid_search_minimum(&ds, l2);
            assert!(
                (fitted - oracle).abs() <= 1e-3,
                "seed {seed} l2 {l2}: newton {fitted} vs grid {oracle}"
            );
            assert!(fitted <= oracle + 1e-9, "newton should not lose to the grid");
            let g = regularized_gradient(&ds.latents, &y, &fit.alpha, fit.beta, l2);
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= 1e-6 * n as f64, "gradient norm {norm}");
            checked += 1;
        }
    }
    assert!(checked >= 5);
}

#[test]
fn fitted_direction_is_stationary_under_finite_differences() {
    let ds = noisy_instance(41, 200, 8);
    let l2 = 1.0 / 200.0;
    let fit = fit_direction(&ds, l2).unwrap();
    let y = hard_targets(&ds);
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let j = rng.random_range(0..=fit.alpha.len());
        let eval = |delta: f64| {
            let mut a = fit.alpha.clone();
            let mut b = fit.beta;
            if j < a.len() {
                a[j] += delta;
            } else {
                b += delta;
            }
            regularized_loss(&ds.latents, &y, &a, b, l2)
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!(fd.abs() <= 1e-4, "coordinate {j}: central difference {fd}");
    }
}

#[test]
fn analytic_gradient_matches_central_differences_off_optimum() {
    let ds = noisy_instance(3, 30, 3);
    let y = hard_targets(&ds);
    let alpha = vec![0.4, -1.1, 0.7];
    let beta = -0.2;
    let l2 = 0.3;
    let g = regularized_gradient(&ds.latents, &y, &alpha, beta, l2);
    let h = 1e-6;
    for j in 0..4 {
        let eval = |delta: f64| {
            let mut a = alpha.clone();
            let mut b = beta;
            if j < 3 {
                a[j] += delta;
            } else {
                b += delta;
            }
            regularized_loss(&ds.latents, &y, &a, b, l2)
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((fd - g[j]).abs() < 1e-6, "coordinate {j}: {fd} vs {}", g[j]);
    }
}

fn direction(alpha: Vec<f64>, beta: f64) -> LatentDirection {
    let norm = alpha.iter().map(|a| a * a).sum::<f64>().sqrt();
    LatentDirection {
        alpha_unit: alpha.iter().map(|a| a / norm).collect(),
        alpha,
        beta,
        projection_std: 1.0,
        train_auc: 1.0,
        l2_strength: 0.0,
        target: Default::default(),
    }
}

/// `sigmoid(z) = (1 + tanh(z / 2)) / 2`, an independent formula.
fn tanh_sigmoid(z: f64) -> f64 {
    0.5 * (1.0 + (0.5 * z).tanh())
}

#[test]
fn latent_predict_agrees_with_independent_sigmoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let d = rng.random_range(1..16);
        let alpha: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let beta = rng.random_range(-2.0..2.0);
        let w = LatentVector((0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect());
        let z: f64 = alpha.iter().zip(&w.0).map(|(a, &x)| a * x as f64).sum::<f64>() + beta;
        let got = latent_predict(&direction(alpha, beta), &w).unwrap();
        let want = tanh_sigmoid(z);
        assert!((got - want).abs() <= 1e-12 * want.max(1e-300) + 1e-15, "{got} vs {want}");
    }
}

#[test]
fn latent_predict_rejects_wrong_dimension() {
    let dir = direction(vec![1.0, 2.0], 0.0);
    let err = latent_predict(&dir, &LatentVector(vec![1.0])).unwrap_err();
    assert!(matches!(err, LcxError::Shape(_)));
}

#[test]
fn single_class_labels_are_rejected() {
    let latents = (0..8).map(|i| LatentVector(vec![i as f32, 1.0])).collect();
    let ds = LatentDataset::from_rows(latents, vec![0.2; 8], 0).unwrap();
    assert!(matches!(fit_direction(&ds, 0.1), Err(LcxError::DegenerateLabels(_))));
}

#[test]
fn lambda_grids_without_zero_are_contract_errors() {
    assert!(matches!(check_lambdas(&[-1.0, 1.0]), Err(LcxError::Contract(_))));
    assert!(matches!(check_lambdas(&[0.0, 0.0]), Err(LcxError::Contract(_))));
    assert!(matches!(check_lambdas(&[0.0, f64::NAN]), Err(LcxError::Contract(_))));
    assert!(check_lambdas(&[-0.5, 0.0, 0.5]).is_ok());
}

proptest! {
    #[test]
    fn latent_score_increases_along_the_direction(
        alpha in prop::collection::vec(-1.0f64..1.0, 4),
        beta in -1.0f64..1.0,
        w in prop::collection::vec(-1.0f32..1.0, 4),
        raw in any::<bool>(),
    ) {
        prop_assume!(alpha.iter().map(|a| a * a).sum::<f64>() > 0.05);
        let dir = direction(alpha, beta);
        let w = LatentVector(w);
        let mode = if raw { StepMode::Raw } else { StepMode::Unit };
        let scores: Vec<f64> = lcx::latent::default_lambdas()
            .iter()
            .map(|&l| latent_predict(&dir, &shifted_latent(&dir, &w, l, mode)).unwrap())
            .collect();
        for pair in scores.windows(2) {
            prop_assert!(pair[1] > pair[0], "{:?}", scores);
        }
    }

    #[test]
    fn zero_step_returns_the_latent_bit_for_bit(
        w in prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 1..8),
    ) {
        let dir = direction(vec![1.0; w.len()], 0.0);
        let w = LatentVector(w);
        let out = shifted_latent(&dir, &w, 0.0, StepMode::Unit);
        let same = out.0.iter().zip(&w.0).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }
}
