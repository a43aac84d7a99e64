//! Monte-Carlo verification of the analytic oracle: the closed-form noise
//! predictor must agree with the statistics of simulated forward noising,
//! and sampling with it must reproduce the data distribution's moments.

use std::sync::Arc;

use diffguard_core::adapters::oracle::analytic_oracle;
use diffguard_core::adapters::NoisePredictor;
use diffguard_core::schedule::{ddim_step, strided_indices, LatentCode, NoiseSchedule, Step};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// OLS fit of `y = a x + b`, returning (a, b, se_a, se_b).
fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x) * (x - mean_x)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
    let a = sxy / sxx;
    let b = mean_y - a * mean_x;
    let rss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - (a * x + b)).powi(2)).sum();
    let s2 = rss / (n - 2.0);
    let se_a = (s2 / sxx).sqrt();
    let se_b = (s2 * (1.0 / n + mean_x * mean_x / sxx)).sqrt();
    (a, b, se_a, se_b)
}

#[test]
fn predictor_matches_regression_of_noise_on_noised_samples() {
    // For scalar data N(mu, sigma^2), E[eps | z_t] is linear in z_t. Fit the
    // regression over 1e5 simulated pairs and compare slope and intercept to
    // the closed form within 3 standard errors.
    let sched = Arc::new(NoiseSchedule::default_linear());
    let cases = [(0.0f64, 1.0f64), (1.5, 0.7), (-0.8, 1.4)];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    for (mu, sigma) in cases {
        for t in [120usize, 500, 930] {
            let abar = sched.alpha_bars()[t];
            let n = 100_000;
            let mut zs = Vec::with_capacity(n);
            let mut es = Vec::with_capacity(n);
            for _ in 0..n {
                let z0 = mu + sigma * normal(&mut rng);
                let eps = normal(&mut rng);
                zs.push(abar.sqrt() * z0 + (1.0 - abar).sqrt() * eps);
                es.push(eps);
            }
            let (a_hat, b_hat, se_a, se_b) = ols(&zs, &es);

            let denom = 1.0 - abar * (1.0 - sigma * sigma);
            let a = (1.0 - abar).sqrt() / denom;
            let b = -a * abar.sqrt() * mu;
            assert!(
                (a_hat - a).abs() <= 3.0 * se_a,
                "slope off at t={t} mu={mu} sigma={sigma}: fit {a_hat} vs {a} (se {se_a})"
            );
            assert!(
                (b_hat - b).abs() <= 3.0 * se_b,
                "intercept off at t={t} mu={mu} sigma={sigma}: fit {b_hat} vs {b} (se {se_b})"
            );
        }
    }
}

#[test]
fn ddim_sampling_reproduces_data_moments() {
    // 200-step DDIM from pure standard normal noise must land within 5% of
    // the data mean and variance over 1e4 samples.
    let sched = Arc::new(NoiseSchedule::default_linear());
    let dim = 4;
    let mu = 1.5;
    let sigma = 0.7;
    let (predictor, _codec) = analytic_oracle(
        sched.clone(),
        Array1::from_elem(dim, mu),
        Array1::from_elem(dim, sigma),
        4,
    )
    .unwrap();

    let ascending = strided_indices(999, 5);
    assert_eq!(ascending.len(), 200);
    let mut targets: Vec<Step> =
        ascending[..ascending.len() - 1].iter().rev().map(|&t| Step::At(t)).collect();
    targets.push(Step::Clean);

    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut samples: Vec<f64> = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let start: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
        let mut z = LatentCode {
            values: ndarray::ArrayD::from_shape_vec(vec![dim], start).unwrap(),
            step: Step::At(999),
        };
        for &target in &targets {
            let eps = predictor.predict(&z, None).unwrap();
            z = ddim_step(&z, target, &eps, &sched).unwrap();
        }
        samples.extend(z.values.iter());
    }
    let count = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / count;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
    assert!(
        (mean - mu).abs() <= 0.05 * mu.abs(),
        "sample mean {mean} vs data mean {mu}"
    );
    assert!(
        (var - sigma * sigma).abs() <= 0.05 * sigma * sigma,
        "sample variance {var} vs data variance {}",
        sigma * sigma
    );
}

#[test]
fn estimate_clean_expectation_equals_data_mean() {
    // E[clean estimate from the oracle's prediction] = data mean, checked
    // within a 3-standard-error band over 1e4 draws.
    let sched = Arc::new(NoiseSchedule::default_linear());
    let mu = 0.6;
    let sigma = 1.2;
    let (predictor, _) = analytic_oracle(
        sched.clone(),
        Array1::from_elem(1, mu),
        Array1::from_elem(1, sigma),
        4,
    )
    .unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for t in [50usize, 400, 900] {
        let abar = sched.alpha_bars()[t];
        let n = 10_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let z0 = mu + sigma * normal(&mut rng);
            let eps = normal(&mut rng);
            let zt = abar.sqrt() * z0 + (1.0 - abar).sqrt() * eps;
            let z = LatentCode {
                values: ndarray::ArrayD::from_shape_vec(vec![1], vec![zt]).unwrap(),
                step: Step::At(t),
            };
            let eps_hat = predictor.predict(&z, None).unwrap();
            let clean =
                diffguard_core::schedule::estimate_clean(&z, &eps_hat, &sched).unwrap();
            let v = clean.values[[0]];
            acc += v;
            acc2 += v * v;
        }
        let mean = acc / n as f64;
        let var = acc2 / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - mu).abs() <= 3.0 * se,
            "t={t}: clean-estimate mean {mean} vs {mu} (se {se})"
        );
    }
}
