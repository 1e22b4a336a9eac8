mod common;

use guidance_interval::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEPS: [usize; 5] = [8, 16, 32, 64, 128];

#[test]
fn heun_is_second_order() {
    let order = common::convergence_order(Solver::Heun, &STEPS);
    assert!((order - 2.0).abs() <= 0.3, "Heun order {order}");
}

#[test]
fn euler_is_first_order() {
    let order = common::convergence_order(Solver::Euler, &STEPS);
    assert!((order - 1.0).abs() <= 0.2, "Euler order {order}");
}

#[test]
fn fine_heun_solve_tracks_the_closed_form() {
    let family = common::gaussian_family(-1.0, 2.0);
    let s = rho_schedule(&RhoScheduleParams::edm(256)).unwrap();
    let t = heun_solve(&family, "c", &s, &GuidanceSpec::unguided(&s), &[40.0]).unwrap();
    // Errors are measured against the initial displacement from the mean.
    let scale = 41.0;
    for i in [0, 64, 128, 255] {
        let want = common::gaussian_state(-1.0, 2.0, 40.0, 80.0, s.sigma(i));
        assert!((t.states[i][0] - want).abs() < 1e-5 * scale, "step {i}: {} vs {want}", t.states[i][0]);
    }
}

#[test]
fn unbounded_interval_is_plain_cfg_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let family = if rng.random_bool(0.5) { toy::one_d() } else { toy::two_d().with_leak(0.2).unwrap() };
        let class = ["A", "B"][rng.random_range(0..2)];
        let steps = rng.random_range(4..40);
        let schedule = rho_schedule(&RhoScheduleParams::edm(steps)).unwrap();
        let w = rng.random_range(1.0..6.0);
        let solver = if rng.random_bool(0.5) { Solver::Heun } else { Solver::Euler };
        let seed = rng.random();
        let guidance = GuidanceSpec::interval(&schedule, w, 0.0, f64::INFINITY).unwrap();
        let n = 16;
        let batch = sample_batch(&family, class, &schedule, &guidance, solver, n, seed).unwrap();
        let ode = GuidedOde::new(&family, class, &schedule, solver).unwrap();
        for i in 0..n {
            let x0 = ode.initial_state(seed, i);
            let want = common::constant_cfg_sample(&family, class, schedule.sigmas(), w, solver, &x0);
            assert_eq!(batch.row(i), want.as_slice(), "w={w} N={steps} {solver:?} chain {i}");
        }
    }
}

#[test]
fn unit_weight_interval_equals_unguided() {
    let family = toy::one_d();
    let s = rho_schedule(&RhoScheduleParams::edm(20)).unwrap();
    let a = sample_batch(&family, "B", &s, &GuidanceSpec::interval(&s, 1.0, 0.3, 5.0).unwrap(), Solver::Heun, 50, 4).unwrap();
    let b = sample_batch(&family, "B", &s, &GuidanceSpec::unguided(&s), Solver::Heun, 50, 4).unwrap();
    assert_eq!(a.as_slice(), b.as_slice());
    assert_eq!(a.provenance().unwrap().nfe.uncond, 0);
}

#[test]
fn evaluation_counts_follow_the_per_step_law() {
    let family = toy::one_d();
    let s = rho_schedule(&RhoScheduleParams::edm(32)).unwrap();
    let ode = GuidedOde::new(&family, "B", &s, Solver::Heun).unwrap();
    let full = GuidanceSpec::constant(&s, 3.0).unwrap();
    assert_eq!(full.nfe(Solver::Heun), Nfe { cond: 63, uncond: 63 });
    let half = GuidanceSpec::from_interval(&s, 3.0, SnappedInterval::from_indices(16, 32)).unwrap();
    assert_eq!(half.nfe(Solver::Heun), Nfe { cond: 63, uncond: 31 });
    let early = GuidanceSpec::from_interval(&s, 3.0, SnappedInterval::from_indices(0, 16)).unwrap();
    assert_eq!(early.nfe(Solver::Heun), Nfe { cond: 63, uncond: 32 });
    assert_eq!(half.nfe(Solver::Euler), Nfe { cond: 32, uncond: 16 });
    for g in [full, half, early] {
        let (_, counted) = ode.solve_terminal(&g, &[1.0]).unwrap();
        assert_eq!(counted, g.nfe(Solver::Heun));
    }
}

#[test]
fn chains_do_not_depend_on_the_partition() {
    let family = toy::two_d();
    let s = rho_schedule(&RhoScheduleParams::edm(12)).unwrap();
    let g = GuidanceSpec::interval(&s, 2.5, 0.3, 3.0).unwrap();
    let ode = GuidedOde::new(&family, "B", &s, Solver::Heun).unwrap();
    let (whole, _) = ode.sample_range(&g, 0..25, 8).unwrap();
    let (a, _) = ode.sample_range(&g, 0..7, 8).unwrap();
    let (b, _) = ode.sample_range(&g, 7..25, 8).unwrap();
    assert_eq!(whole, [a, b].concat());
}

#[test]
fn trajectories_end_at_the_batch() {
    let family = toy::one_d();
    let s = rho_schedule(&RhoScheduleParams::edm(16)).unwrap();
    let g = GuidanceSpec::interval(&s, 3.0, 0.3, 1.0).unwrap();
    let ode = GuidedOde::new(&family, "B", &s, Solver::Heun).unwrap();
    let batch = ode.sample_batch(&g, 10, 3, "B").unwrap();
    let paths = ode.trajectories(&g, 0..10, 3).unwrap();
    for (i, t) in paths.iter().enumerate() {
        assert_eq!(t.states.len(), 17);
        assert_eq!(t.terminal(), batch.row(i));
        assert_eq!(t.weights, g.weights());
    }
}

#[test]
fn profile_weights_apply_per_step() {
    let family = toy::one_d();
    let s = rho_schedule(&RhoScheduleParams::edm(8)).unwrap();
    let profile = vec![1.0, 1.0, 2.0, 4.0, 2.0, 1.0, 1.0, 1.0];
    let g = custom_weight_profile(&s, profile.clone()).unwrap();
    assert_eq!(g.weights(), profile.as_slice());
    assert!(custom_weight_profile(&s, vec![1.0; 7]).is_err());
    let t = heun_solve(&family, "B", &s, &g, &[3.0]).unwrap();
    assert_eq!(t.nfe, Nfe { cond: 15, uncond: 6 });
}

#[test]
fn divergence_is_reported_with_its_step() {
    let family = toy::one_d();
    let s = rho_schedule(&RhoScheduleParams::edm(8)).unwrap();
    let g = GuidanceSpec::constant(&s, 1e306).unwrap();
    match sample_batch(&family, "B", &s, &g, Solver::Euler, 4, 0) {
        Err(Error::SolverDivergence { chain, .. }) => assert!(chain.is_some()),
        other => panic!("expected divergence, got {other:?}"),
    }
}
