mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sdcm::gp::Hyperparameters;
use sdcm::hyperopt::{fit, likelihood_gradient, log_marginal_likelihood, MarginalLikelihood, SearchConfig};

fn random_theta(rng: &mut ChaCha8Rng) -> Hyperparameters {
    Hyperparameters::new(
        10f64.powf(rng.random_range(-0.3..0.6)),
        10f64.powf(rng.random_range(-0.7..0.5)),
        10f64.powf(rng.random_range(-2.0..-0.7)),
    )
    .unwrap()
}

#[test]
fn likelihood_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..10 {
        let (inputs, targets) = random_dataset(30, 3, 200 + case);
        let th = random_theta(&mut rng);
        let v = log_marginal_likelihood(&inputs, &targets, &th).unwrap();
        let o = oracle_lml(&inputs, &targets, th.delta, th.sigma, th.sigma_u_tilde);
        assert!(rel_err(v, o) <= 1e-8, "case {case}: {v} vs {o}");
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    for case in 0..10 {
        let (inputs, targets) = random_dataset(20, 3, 300 + case);
        let th = random_theta(&mut rng);
        let g = likelihood_gradient(&inputs, &targets, &th).unwrap();
        let base = th.to_log();
        for c in 0..3 {
            let at = |d: f64| {
                let mut x = base;
                x[c] += d;
                oracle_lml(&inputs, &targets, x[0].exp(), x[1].exp(), x[2].exp())
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            assert!(rel_err(g[c], fd) <= 1e-4, "case {case} component {c}: {} vs {fd}", g[c]);
        }
    }
}

#[test]
fn noise_gradient_points_down_at_floor_for_noiseless_data() {
    let inputs: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 3.0]).collect();
    let targets: Vec<f64> = inputs.iter().map(|z| 0.3 + 0.2 * (z[0] * 0.1).sin()).collect();
    let th = Hyperparameters::new(1.0, 1.0, 1e-5).unwrap();
    let g = likelihood_gradient(&inputs, &targets, &th).unwrap();
    let h = 1e-3;
    let lml = |s: f64| oracle_lml(&inputs, &targets, 1.0, 1.0, s);
    let fd = (lml((th.sigma_u_tilde.ln() + h).exp()) - lml((th.sigma_u_tilde.ln() - h).exp())) / (2.0 * h);
    assert!(g[2] <= 0.0, "{}", g[2]);
    assert!(fd <= 0.0, "{fd}");
}

#[test]
fn constant_shift_of_references_leaves_likelihood_unchanged() {
    let (inputs, targets) = random_dataset(25, 2, 5);
    let shifted: Vec<f64> = targets.iter().map(|u| u + 0.37).collect();
    let th = Hyperparameters::new(0.9, 0.6, 0.05).unwrap();
    let a = log_marginal_likelihood(&inputs, &targets, &th).unwrap();
    let b = log_marginal_likelihood(&inputs, &shifted, &th).unwrap();
    assert!((a - b).abs() < 1e-10);
}

fn small_search(n_trials: usize, seed: u64) -> SearchConfig {
    SearchConfig { n_trials, rng_seed: seed, ..SearchConfig::default() }
}

#[test]
fn fit_beats_the_generating_hyperparameters() {
    let truth = Hyperparameters::new(0.8, 0.5, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let inputs: Vec<Vec<f64>> =
        (0..200).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
    let k = sigma11(&inputs, truth.delta, truth.sigma, truth.sigma_u_tilde);
    let l = cholesky(&k);
    let e: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
    let targets: Vec<f64> = (0..200).map(|i| 0.4 + (0..=i).map(|j| l[i][j] * e[j]).sum::<f64>()).collect();

    let result = fit(&inputs, &targets, &small_search(8, 1)).unwrap();
    let at_truth = log_marginal_likelihood(&inputs, &targets, &truth).unwrap();
    assert!(result.log_likelihood >= at_truth - 1e-6, "{} < {at_truth}", result.log_likelihood);
}

#[test]
fn fit_is_deterministic_and_stays_in_range() {
    let (inputs, targets) = random_dataset(40, 3, 6);
    let cfg = small_search(6, 9);
    let a = fit(&inputs, &targets, &cfg).unwrap();
    let b = fit(&inputs, &targets, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(cfg.contains(&a.theta));
    for t in &a.trials {
        assert!(cfg.contains(&t.theta), "trial {}", t.trial);
    }
    let best = a.trials.iter().map(|t| t.log_likelihood).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best, a.log_likelihood);
    let s0 = a.trials[0].start;
    assert!(
        rel_err(s0.delta, 1.0) < 1e-14 && rel_err(s0.sigma, 1.0) < 1e-14 && rel_err(s0.sigma_u_tilde, 1e-3) < 1e-14
    );
}

#[test]
fn best_likelihood_is_monotone_in_trial_count() {
    let (inputs, targets) = random_dataset(30, 2, 8);
    let mut prev = f64::NEG_INFINITY;
    for n in 1..=6 {
        let r = fit(&inputs, &targets, &small_search(n, 21)).unwrap();
        assert!(r.log_likelihood >= prev);
        prev = r.log_likelihood;
    }
}

#[test]
fn fitted_optimum_is_a_local_maximum() {
    let (inputs, targets) = random_dataset(30, 2, 12);
    let cfg = small_search(4, 2);
    let r = fit(&inputs, &targets, &cfg).unwrap();
    let surface = MarginalLikelihood::new(&inputs, &targets, true).unwrap();
    let x = r.theta.to_log();
    for c in 0..3 {
        for d in [-1e-3, 1e-3] {
            let mut y = x;
            y[c] += d;
            let th = Hyperparameters::from_log(y);
            if cfg.contains(&th) {
                assert!(surface.value(&th).unwrap() <= r.log_likelihood + 1e-9);
            }
        }
    }
}
