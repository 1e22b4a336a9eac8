mod common;

use guidance_interval::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn level(s: f64) -> NoiseLevel {
    NoiseLevel::new(s).unwrap()
}

/// `(x, σ)` pairs where noisy data actually lands.
fn noisy_pairs(mix: &GaussianMixture, count: usize, seed: u64) -> Vec<(f64, f64)> {
    let data = mix.sample_data(count, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.rows()
        .map(|y| {
            let sigma = 10f64.powf(rng.random_range(-2.0..80f64.log10()));
            let z: f64 = rng.sample(StandardNormal);
            (y[0] + sigma * z, sigma)
        })
        .collect()
}

#[test]
fn denoiser_agrees_with_quadrature() {
    let family = toy::one_d();
    for mix in [family.class("B").unwrap(), family.unconditional()] {
        let mut worst: f64 = 0.0;
        for (x, sigma) in noisy_pairs(mix, 300, 1) {
            let d = mix.ideal_denoise(&[x], level(sigma)).unwrap()[0];
            let q = common::quadrature_denoise(mix, x, sigma);
            worst = worst.max((d - q).abs() / q.abs().max(1.0));
        }
        assert!(worst < 1e-6, "worst relative error {worst:e}");
    }
}

#[test]
fn score_agrees_with_finite_differences() {
    let h = 1e-5;
    for family in [toy::one_d(), toy::two_d()] {
        let mix = family.unconditional();
        let data = mix.sample_data(200, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for y in data.rows() {
            let sigma = 10f64.powf(rng.random_range(-1.3..1.9));
            let x: Vec<f64> = y.iter().map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
            let score = mix.score(&x, level(sigma)).unwrap();
            for a in 0..x.len() {
                let mut up = x.clone();
                let mut down = x.clone();
                up[a] += h;
                down[a] -= h;
                let fd = (mix.log_smoothed_density(&up, level(sigma)).unwrap()
                    - mix.log_smoothed_density(&down, level(sigma)).unwrap())
                    / (2.0 * h);
                assert!((fd - score[a]).abs() < 1e-4, "σ={sigma} x={x:?}: {fd} vs {}", score[a]);
            }
        }
    }
}

#[test]
fn tweedie_links_denoiser_and_score() {
    let mix = toy::two_d().unconditional().clone();
    for (x, s) in [([0.3, -1.0], 0.2), ([4.0, 4.0], 2.0), ([-2.0, -2.1], 0.05)] {
        let d = mix.ideal_denoise(&x, level(s)).unwrap();
        let g = mix.score(&x, level(s)).unwrap();
        for a in 0..2 {
            assert!((d[a] - (x[a] + s * s * g[a])).abs() < 1e-9);
        }
    }
}

#[test]
fn smoothed_density_integrates_to_one() {
    let mix = toy::one_d().unconditional().clone();
    for s in [0.01, 0.5, 5.0] {
        let (lo, hi, m) = (-12.0 - 8.0 * s, 12.0 + 8.0 * s, 200_001);
        let h = (hi - lo) / (m - 1) as f64;
        let total: f64 = (0..m)
            .map(|i| {
                let end = if i == 0 || i == m - 1 { 0.5 } else { 1.0 };
                end * mix.smoothed_density(&[lo + i as f64 * h], level(s)).unwrap()
            })
            .sum::<f64>()
            * h;
        assert!((total - 1.0).abs() < 1e-8, "σ={s}: {total}");
    }
}

#[test]
fn data_draws_hit_components_in_proportion() {
    let mix = toy::one_d().class(toy::TARGET_CLASS).unwrap().clone();
    let n = 40_000;
    let masses = mode_masses(&mix.sample_data(n, 3).unwrap(), &mix).unwrap();
    let se = (toy::MINORITY_MASS * (1.0 - toy::MINORITY_MASS) / n as f64).sqrt();
    assert!((masses[toy::MINORITY_COMPONENT] - toy::MINORITY_MASS).abs() < 4.0 * se);
}

#[test]
fn leak_blends_in_the_other_classes() {
    let family = toy::two_d();
    let leaky = family.with_leak(toy::IMPERFECT_LEAK).unwrap();
    let x = [0.2, -0.4];
    let s = level(0.7);
    let own = family.class("B").unwrap().smoothed_density(&x, s).unwrap();
    let (pa, pc) = (family.classes()[0].prior, family.classes()[2].prior);
    let rest = (pa * family.class("A").unwrap().smoothed_density(&x, s).unwrap()
        + pc * family.class("C").unwrap().smoothed_density(&x, s).unwrap())
        / (pa + pc);
    let want = (1.0 - toy::IMPERFECT_LEAK) * own + toy::IMPERFECT_LEAK * rest;
    let got = leaky.class("B").unwrap().smoothed_density(&x, s).unwrap();
    assert!((got - want).abs() < 1e-12 * want.max(1.0));
    // The unconditional model stays the prior mixture of the class models.
    let u: f64 = leaky
        .classes()
        .iter()
        .map(|c| c.prior * c.mixture.smoothed_density(&x, s).unwrap())
        .sum();
    let got = leaky.unconditional().smoothed_density(&x, s).unwrap();
    assert!((got - u).abs() < 1e-12 * u.max(1.0));
}
