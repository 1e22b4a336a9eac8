//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::f64::consts::PI;

use guidance_interval::prelude::*;

/// `D(x; σ)` of a 1-D mixture by trapezoid quadrature of
/// `∫ y p(y) N(x; y, σ²) dy / ∫ p(y) N(x; y, σ²) dy`.
pub fn quadrature_denoise(mix: &GaussianMixture, x: f64, sigma: f64) -> f64 {
    let comps = mix.components();
    let sd = |c: &Component| c.variance[0].sqrt();
    let data_lo = comps.iter().map(|c| c.mean[0] - 12.0 * sd(c)).fold(f64::INFINITY, f64::min);
    let data_hi = comps.iter().map(|c| c.mean[0] + 12.0 * sd(c)).fold(f64::NEG_INFINITY, f64::max);
    let lo = data_lo.max(x - 12.0 * sigma);
    let hi = data_hi.min(x + 12.0 * sigma);
    assert!(lo < hi, "kernel and data do not overlap");
    let m = 40_001;
    let h = (hi - lo) / (m - 1) as f64;
    let log_integrand: Vec<(f64, f64)> = (0..m)
        .map(|i| {
            let y = lo + i as f64 * h;
            let p: f64 = comps
                .iter()
                .map(|c| c.weight * (-(y - c.mean[0]).powi(2) / (2.0 * c.variance[0])).exp() / (2.0 * PI * c.variance[0]).sqrt())
                .sum();
            (y, p.ln() - (x - y).powi(2) / (2.0 * sigma * sigma))
        })
        .collect();
    let peak = log_integrand.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &(y, l)) in log_integrand.iter().enumerate() {
        let end = if i == 0 || i == m - 1 { 0.5 } else { 1.0 };
        let v = end * (l - peak).exp();
        num += y * v;
        den += v;
    }
    num / den
}

/// A family with one Gaussian class `"c"`, so conditional and unconditional
/// denoisers coincide.
pub fn gaussian_family(mean: f64, variance: f64) -> ConditionedFamily {
    ConditionedFamily::new(vec![Class {
        label: "c".into(),
        prior: 1.0,
        mixture: GaussianMixture::gaussian(vec![mean], vec![variance]).unwrap(),
    }])
    .unwrap()
}

/// Exact ODE state for Gaussian data: `x(σ) = μ + (x₀ − μ) √((s² + σ²)/(s² + σ₀²))`.
pub fn gaussian_state(mean: f64, variance: f64, x0: f64, sigma0: f64, sigma: f64) -> f64 {
    mean + (x0 - mean) * ((variance + sigma * sigma) / (variance + sigma0 * sigma0)).sqrt()
}

/// Exact state at `σ_min` followed by the last step to `σ = 0`, which any
/// first-order step lands on `D(x; σ_min)` exactly.
pub fn gaussian_terminal(mean: f64, variance: f64, x0: f64, sigma0: f64, sigma_min: f64) -> f64 {
    let x = gaussian_state(mean, variance, x0, sigma0, sigma_min);
    mean + variance / (variance + sigma_min * sigma_min) * (x - mean)
}

/// Least-squares slope of `log(error)` against `log(N)`, negated.
pub fn convergence_order(solver: Solver, steps: &[usize]) -> f64 {
    let (mean, variance) = (0.5, 0.25);
    let family = gaussian_family(mean, variance);
    let starts = [-150.0, -60.0, 35.0, 110.0];
    let points: Vec<(f64, f64)> = steps
        .iter()
        .map(|&n| {
            let params = RhoScheduleParams {
                sigma_min: 0.002,
                sigma_max: 80.0,
                rho: 7.0,
                steps: n,
            };
            let schedule = rho_schedule(&params).unwrap();
            let guidance = GuidanceSpec::unguided(&schedule);
            let ode = GuidedOde::new(&family, "c", &schedule, solver).unwrap();
            let err = starts
                .iter()
                .map(|&x0| {
                    let (x, _) = ode.solve_terminal(&guidance, &[x0]).unwrap();
                    (x[0] - gaussian_terminal(mean, variance, x0, 80.0, 0.002)).abs()
                })
                .fold(0.0, f64::max);
            ((n as f64).ln(), err.ln())
        })
        .collect();
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    -sxy / sxx
}

/// Plain constant-weight CFG sampler written out step by step.
pub fn constant_cfg_sample(
    family: &ConditionedFamily,
    class: &str,
    sigmas: &[f64],
    w: f64,
    solver: Solver,
    x0: &[f64],
) -> Vec<f64> {
    let cond = family.class(class).unwrap();
    let uncond = family.unconditional();
    let dim = x0.len();
    let drift = |x: &[f64], sigma: f64| -> Vec<f64> {
        let level = NoiseLevel::new(sigma).unwrap();
        let mut c = vec![0.0; dim];
        cond.denoise_into(x, level, &mut c).unwrap();
        if w == 1.0 {
            return c.iter().zip(x).map(|(&ci, &xi)| -(ci - xi) / sigma).collect();
        }
        let mut u = vec![0.0; dim];
        uncond.denoise_into(x, level, &mut u).unwrap();
        (0..dim).map(|i| -((w * c[i] + (1.0 - w) * u[i]) - x[i]) / sigma).collect()
    };
    let mut x = x0.to_vec();
    for pair in sigmas.windows(2) {
        let (s0, s1) = (pair[0], pair[1]);
        let h = s1 - s0;
        let d1 = drift(&x, s0);
        let xp: Vec<f64> = x.iter().zip(&d1).map(|(&xi, &di)| xi + h * di).collect();
        if solver == Solver::Heun && s1 > 0.0 {
            let d2 = drift(&xp, s1);
            for i in 0..dim {
                x[i] += h * ((d1[i] + d2[i]) / 2.0);
            }
        } else {
            x = xp;
        }
    }
    x
}

/// The iDDPM levels computed from `ᾱ_j = (1 − cos(π j / (M (C2 + 1)))) / 2`
/// and floating-point index rounding.
pub fn iddpm_levels(c1: f64, c2: f64, m: usize, j0: usize, steps: usize) -> Vec<f64> {
    let abar = |j: usize| (1.0 - (PI * j as f64 / (m as f64 * (c2 + 1.0))).cos()) / 2.0;
    let mut u = vec![0.0f64; m + 1];
    for j in (1..=m).rev() {
        let ratio = (abar(j - 1) / abar(j)).max(c1);
        u[j - 1] = ((u[j].powi(2) + 1.0) / ratio - 1.0).sqrt();
    }
    let mut out: Vec<f64> = (0..steps)
        .map(|i| {
            let t = j0 as f64 + (m - 1 - j0) as f64 / (steps - 1) as f64 * i as f64;
            u[(t + 0.5).floor() as usize]
        })
        .collect();
    out.push(0.0);
    out
}
