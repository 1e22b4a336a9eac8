//! Deterministic probability-flow ODE solvers with a per-step guidance weight.
//!
//! The guided ODE is `dx/dσ = −(w(σ) D(x|c; σ) + (1 − w(σ)) D(x; σ) − x) / σ`.
//! A [`GuidanceSpec`] compiles `w(σ)` to one weight per step so that the
//! weight is constant inside every solver step, including both stages of a
//! Heun step.
//!
//! NFE accounting: every drift evaluation costs one conditional denoiser call,
//! plus one unconditional call when the step's weight differs from 1. Skipping
//! the unconditional call at `w = 1` is where the interval saves compute.

use std::ops::{Add, AddAssign, Range};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::SampleBatch;
use crate::error::{Error, Result};
use crate::mixture::{ConditionedFamily, GaussianMixture, NoiseLevel};
use crate::rng::{self, Domain};
use crate::schedule::{NoiseSchedule, ScheduleRule, SnappedInterval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    #[default]
    Heun,
}

impl Solver {
    /// Drift evaluations in step `a` of a schedule with `n` steps.
    pub fn stages(self, a: usize, n: usize) -> u64 {
        match self {
            Solver::Euler => 1,
            // The final step lands on σ = 0 and is a plain Euler step.
            Solver::Heun if a + 1 == n => 1,
            Solver::Heun => 2,
        }
    }
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Solver::Euler),
            "heun" => Ok(Solver::Heun),
            other => Err(Error::input(format!("unknown solver {other:?} (expected euler or heun)"))),
        }
    }
}

/// Denoiser evaluation counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Nfe {
    pub cond: u64,
    pub uncond: u64,
}

impl Nfe {
    pub fn total(&self) -> u64 {
        self.cond + self.uncond
    }

    pub fn scaled(self, n: u64) -> Nfe {
        Nfe {
            cond: self.cond * n,
            uncond: self.uncond * n,
        }
    }
}

impl Add for Nfe {
    type Output = Nfe;

    fn add(self, o: Nfe) -> Nfe {
        Nfe {
            cond: self.cond + o.cond,
            uncond: self.uncond + o.uncond,
        }
    }
}

impl AddAssign for Nfe {
    fn add_assign(&mut self, o: Nfe) {
        *self = *self + o;
    }
}

/// How a guidance table was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GuidanceKind {
    /// `w` inside a snapped interval, 1 elsewhere.
    Interval { w: f64, interval: SnappedInterval },
    /// Arbitrary per-step weights.
    Profile,
}

/// Per-step guidance weights for one schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    kind: GuidanceKind,
    weights: Vec<f64>,
}

impl GuidanceSpec {
    /// `w` on the steps of `interval`, 1 elsewhere.
    pub fn from_interval(schedule: &NoiseSchedule, w: f64, interval: SnappedInterval) -> Result<Self> {
        if !w.is_finite() {
            return Err(Error::input(format!("guidance weight must be finite, got {w}")));
        }
        let n = schedule.steps();
        if let SnappedInterval::Steps { lo, .. } = interval {
            if lo > n {
                return Err(Error::input(format!("interval index {lo} is outside a {n}-step schedule")));
            }
        }
        let weights = (0..n).map(|a| if interval.contains_step(a) { w } else { 1.0 }).collect();
        Ok(GuidanceSpec {
            kind: GuidanceKind::Interval { w, interval },
            weights,
        })
    }

    /// Snap `(σ_lo, σ_hi]` onto `schedule` and guide with `w` inside it.
    pub fn interval(schedule: &NoiseSchedule, w: f64, sigma_lo: f64, sigma_hi: f64) -> Result<Self> {
        let snapped = schedule.snap_interval(sigma_lo, sigma_hi)?;
        GuidanceSpec::from_interval(schedule, w, snapped)
    }

    /// Guidance on every step: standard CFG.
    pub fn constant(schedule: &NoiseSchedule, w: f64) -> Result<Self> {
        GuidanceSpec::interval(schedule, w, 0.0, f64::INFINITY)
    }

    /// No guidance: the plain conditional ODE.
    pub fn unguided(schedule: &NoiseSchedule) -> Self {
        GuidanceSpec::from_interval(schedule, 1.0, SnappedInterval::Empty).expect("weight 1 is finite")
    }

    /// Use `profile` verbatim as the per-step weight table.
    pub fn custom_profile(schedule: &NoiseSchedule, profile: Vec<f64>) -> Result<Self> {
        if profile.len() != schedule.steps() {
            return Err(Error::input(format!(
                "profile has {} weights, schedule has {} steps",
                profile.len(),
                schedule.steps()
            )));
        }
        if profile.iter().any(|w| !w.is_finite()) {
            return Err(Error::input("profile weights must be finite"));
        }
        Ok(GuidanceSpec {
            kind: GuidanceKind::Profile,
            weights: profile,
        })
    }

    pub fn kind(&self) -> &GuidanceKind {
        &self.kind
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn steps(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, a: usize) -> f64 {
        self.weights[a]
    }

    /// Step `a` needs the unconditional denoiser.
    pub fn is_guided(&self, a: usize) -> bool {
        self.weights[a] != 1.0
    }

    pub fn guided_steps(&self) -> usize {
        (0..self.steps()).filter(|&a| self.is_guided(a)).count()
    }

    /// Analytic NFE of one chain under `solver`.
    pub fn nfe(&self, solver: Solver) -> Nfe {
        let n = self.steps();
        let mut nfe = Nfe::default();
        for a in 0..n {
            let k = solver.stages(a, n);
            nfe.cond += k;
            if self.is_guided(a) {
                nfe.uncond += k;
            }
        }
        nfe
    }
}

/// A solved chain: `x_0 … x_N` plus per-step guidance and evaluation counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
    pub weights: Vec<f64>,
    pub nfe: Nfe,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("a trajectory has at least two states")
    }

    pub fn guided(&self, a: usize) -> bool {
        self.weights.get(a).is_some_and(|&w| w != 1.0)
    }
}

/// Where a batch came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub class: String,
    pub schedule: ScheduleRule,
    pub solver: Solver,
    pub guidance: GuidanceSpec,
    pub chains: usize,
    pub nfe: Nfe,
}

/// `−(w D(x|c; σ) + (1 − w) D(x; σ) − x) / σ`.
pub fn drift(family: &ConditionedFamily, class: &str, x: &[f64], sigma: NoiseLevel, w: f64) -> Result<Vec<f64>> {
    if sigma.get() == 0.0 {
        return Err(Error::Domain("the ODE drift is undefined at sigma = 0".into()));
    }
    let d = family.guided_denoise(class, x, sigma, w)?;
    Ok(d.iter().zip(x).map(|(di, xi)| -(di - xi) / sigma.get()).collect())
}

/// A conditional/unconditional denoiser pair bound to one class and schedule.
#[derive(Debug, Clone, Copy)]
pub struct GuidedOde<'a> {
    cond: &'a GaussianMixture,
    uncond: &'a GaussianMixture,
    schedule: &'a NoiseSchedule,
    solver: Solver,
}

struct Scratch {
    cond: Vec<f64>,
    uncond: Vec<f64>,
}

impl<'a> GuidedOde<'a> {
    pub fn new(family: &'a ConditionedFamily, class: &str, schedule: &'a NoiseSchedule, solver: Solver) -> Result<Self> {
        Ok(GuidedOde {
            cond: family.class(class)?,
            uncond: family.unconditional(),
            schedule,
            solver,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        self.schedule
    }

    pub fn solver(&self) -> Solver {
        self.solver
    }

    fn dim(&self) -> usize {
        self.cond.dim()
    }

    fn check(&self, guidance: &GuidanceSpec) -> Result<()> {
        if guidance.steps() != self.schedule.steps() {
            return Err(Error::input(format!(
                "guidance table has {} steps, schedule has {}",
                guidance.steps(),
                self.schedule.steps()
            )));
        }
        Ok(())
    }

    fn drift_into(&self, x: &[f64], sigma: f64, w: f64, out: &mut [f64], s: &mut Scratch, nfe: &mut Nfe) -> Result<()> {
        let level = NoiseLevel::new_unchecked(sigma);
        self.cond.denoise_into(x, level, &mut s.cond)?;
        nfe.cond += 1;
        if w != 1.0 {
            self.uncond.denoise_into(x, level, &mut s.uncond)?;
            nfe.uncond += 1;
            for (((o, &c), &u), &xi) in out.iter_mut().zip(&s.cond).zip(&s.uncond).zip(x) {
                *o = -((w * c + (1.0 - w) * u) - xi) / sigma;
            }
        } else {
            for ((o, &c), &xi) in out.iter_mut().zip(&s.cond).zip(x) {
                *o = -(c - xi) / sigma;
            }
        }
        Ok(())
    }

    /// Integrate from `x0` at `σ_0` down to `σ_N = 0`.
    fn integrate(&self, guidance: &GuidanceSpec, x0: &[f64], mut record: Option<&mut Vec<Vec<f64>>>) -> Result<(Vec<f64>, Nfe)> {
        self.check(guidance)?;
        let dim = self.dim();
        if x0.len() != dim {
            return Err(Error::input(format!("initial state has length {}, expected {dim}", x0.len())));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("initial state must be finite"));
        }
        let sig = self.schedule.sigmas();
        let n = self.schedule.steps();
        let mut s = Scratch {
            cond: vec![0.0; dim],
            uncond: vec![0.0; dim],
        };
        let mut nfe = Nfe::default();
        let mut x = x0.to_vec();
        let mut d1 = vec![0.0; dim];
        let mut d2 = vec![0.0; dim];
        let mut xp = vec![0.0; dim];
        if let Some(r) = record.as_deref_mut() {
            r.push(x.clone());
        }
        for a in 0..n {
            let w = guidance.weight(a);
            let h = sig[a + 1] - sig[a];
            self.drift_into(&x, sig[a], w, &mut d1, &mut s, &mut nfe)?;
            for ((p, &xi), &di) in xp.iter_mut().zip(&x).zip(&d1) {
                *p = xi + h * di;
            }
            if self.solver == Solver::Heun && sig[a + 1] > 0.0 {
                self.drift_into(&xp, sig[a + 1], w, &mut d2, &mut s, &mut nfe)?;
                for ((xi, &a1), &a2) in x.iter_mut().zip(&d1).zip(&d2) {
                    *xi += h * ((a1 + a2) / 2.0);
                }
            } else {
                x.copy_from_slice(&xp);
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::SolverDivergence { chain: None, step: a });
            }
            if let Some(r) = record.as_deref_mut() {
                r.push(x.clone());
            }
        }
        Ok((x, nfe))
    }

    /// Solve one chain and record every state.
    pub fn solve(&self, guidance: &GuidanceSpec, x0: &[f64]) -> Result<Trajectory> {
        let mut states = Vec::with_capacity(self.schedule.steps() + 1);
        let (_, nfe) = self.integrate(guidance, x0, Some(&mut states))?;
        Ok(Trajectory {
            states,
            sigmas: self.schedule.sigmas().to_vec(),
            weights: guidance.weights().to_vec(),
            nfe,
        })
    }

    /// Terminal state of one chain.
    pub fn solve_terminal(&self, guidance: &GuidanceSpec, x0: &[f64]) -> Result<(Vec<f64>, Nfe)> {
        self.integrate(guidance, x0, None)
    }

    /// Initial state of chain `chain`: `σ_0 · z` with `z ~ N(0, I)`.
    pub fn initial_state(&self, seed: u64, chain: usize) -> Vec<f64> {
        let mut rng = rng::stream(seed, Domain::InitialNoise, chain as u64);
        let s0 = self.schedule.sigma_max();
        (0..self.dim())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                s0 * z
            })
            .collect()
    }

    /// Terminal states of chains `range`; chain `i` is the same wherever it
    /// falls in a partition.
    pub fn sample_range(&self, guidance: &GuidanceSpec, range: Range<usize>, seed: u64) -> Result<(Vec<f64>, Nfe)> {
        self.check(guidance)?;
        let dim = self.dim();
        let results: Vec<Result<(Vec<f64>, Nfe)>> = range
            .into_par_iter()
            .map(|i| {
                self.solve_terminal(guidance, &self.initial_state(seed, i))
                    .map_err(|e| e.with_chain(i))
            })
            .collect();
        let mut data = Vec::with_capacity(results.len() * dim);
        let mut nfe = Nfe::default();
        for r in results {
            let (x, k) = r?;
            data.extend_from_slice(&x);
            nfe += k;
        }
        Ok((data, nfe))
    }

    /// `n` independent chains from `N(0, σ_0² I)`, returning terminal states.
    pub fn sample_batch(&self, guidance: &GuidanceSpec, n: usize, seed: u64, class: &str) -> Result<SampleBatch> {
        if n == 0 {
            return Err(Error::input("sample count must be >= 1"));
        }
        let (data, nfe) = self.sample_range(guidance, 0..n, seed)?;
        let provenance = Provenance {
            class: class.to_string(),
            schedule: *self.schedule.rule(),
            solver: self.solver,
            guidance: guidance.clone(),
            chains: n,
            nfe,
        };
        Ok(SampleBatch::new(self.dim(), data, seed)?.with_provenance(provenance))
    }

    /// Full trajectories of chains `range`.
    pub fn trajectories(&self, guidance: &GuidanceSpec, range: Range<usize>, seed: u64) -> Result<Vec<Trajectory>> {
        range
            .into_par_iter()
            .map(|i| self.solve(guidance, &self.initial_state(seed, i)).map_err(|e| e.with_chain(i)))
            .collect()
    }
}

/// Second-order Heun solve of one chain (final step to `σ = 0` is Euler).
pub fn heun_solve(
    family: &ConditionedFamily,
    class: &str,
    schedule: &NoiseSchedule,
    guidance: &GuidanceSpec,
    x0: &[f64],
) -> Result<Trajectory> {
    GuidedOde::new(family, class, schedule, Solver::Heun)?.solve(guidance, x0)
}

/// First-order Euler solve of one chain.
pub fn euler_solve(
    family: &ConditionedFamily,
    class: &str,
    schedule: &NoiseSchedule,
    guidance: &GuidanceSpec,
    x0: &[f64],
) -> Result<Trajectory> {
    GuidedOde::new(family, class, schedule, Solver::Euler)?.solve(guidance, x0)
}

/// `n` guided samples of class `class`.
pub fn sample_batch(
    family: &ConditionedFamily,
    class: &str,
    schedule: &NoiseSchedule,
    guidance: &GuidanceSpec,
    solver: Solver,
    n: usize,
    seed: u64,
) -> Result<SampleBatch> {
    GuidedOde::new(family, class, schedule, solver)?.sample_batch(guidance, n, seed, class)
}

/// A guidance table given step by step.
pub fn custom_weight_profile(schedule: &NoiseSchedule, profile: Vec<f64>) -> Result<GuidanceSpec> {
    GuidanceSpec::custom_profile(schedule, profile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{Class, Component};
    use crate::schedule::{rho_schedule, RhoScheduleParams};
    use crate::toy;

    fn single(mu: f64, s2: f64) -> ConditionedFamily {
        ConditionedFamily::new(vec![Class {
            label: "g".into(),
            prior: 1.0,
            mixture: GaussianMixture::new(vec![Component::new(1.0, vec![mu], vec![s2])]).unwrap(),
        }])
        .unwrap()
    }

    fn edm(n: usize) -> NoiseSchedule {
        rho_schedule(&RhoScheduleParams::edm(n)).unwrap()
    }

    #[test]
    fn drift_collapses_to_conditional_ode() {
        let fam = single(0.5, 0.3);
        let s = NoiseLevel::new(2.0).unwrap();
        let d = drift(&fam, "g", &[1.7], s, 1.0).unwrap()[0];
        let want = 2.0 * (1.7 - 0.5) / (0.3 + 4.0);
        assert!((d - want).abs() < 1e-14);
        assert!(matches!(drift(&fam, "g", &[1.7], NoiseLevel::ZERO, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn drift_is_linear_in_weight() {
        let fam = toy::one_d();
        let c = toy::TARGET_CLASS;
        let s = NoiseLevel::new(1.0).unwrap();
        let g = drift(&fam, c, &[0.5], s, 2.0).unwrap()[0];
        let cond = drift(&fam, c, &[0.5], s, 1.0).unwrap()[0];
        let uncond = drift(&fam, c, &[0.5], s, 0.0).unwrap()[0];
        assert!((g - (2.0 * cond - uncond)).abs() < 1e-12);
    }

    #[test]
    fn nfe_counts() {
        let sched = edm(32);
        let fam = toy::one_d();
        let ode = GuidedOde::new(&fam, toy::TARGET_CLASS, &sched, Solver::Heun).unwrap();
        let full = GuidanceSpec::constant(&sched, 3.0).unwrap();
        let none = GuidanceSpec::unguided(&sched);
        assert_eq!(ode.solve(&full, &[10.0]).unwrap().nfe, Nfe { cond: 63, uncond: 63 });
        assert_eq!(ode.solve(&none, &[10.0]).unwrap().nfe, Nfe { cond: 63, uncond: 0 });
        assert_eq!(full.nfe(Solver::Heun), Nfe { cond: 63, uncond: 63 });
        assert_eq!(full.nfe(Solver::Euler), Nfe { cond: 32, uncond: 32 });
    }

    #[test]
    fn empty_interval_matches_unguided_bitwise() {
        let sched = edm(16);
        let fam = toy::one_d();
        let ode = GuidedOde::new(&fam, toy::TARGET_CLASS, &sched, Solver::Heun).unwrap();
        let empty = GuidanceSpec::from_interval(&sched, 5.0, SnappedInterval::Empty).unwrap();
        let plain = GuidanceSpec::unguided(&sched);
        let a = ode.solve(&empty, &[12.5]).unwrap();
        let b = ode.solve(&plain, &[12.5]).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.nfe.uncond, 0);
    }

    #[test]
    fn euler_single_step_lands_on_denoised_point() {
        let sched = NoiseSchedule::from_sigmas(vec![5.0, 0.0], ScheduleRule::Rho(RhoScheduleParams::edm(2))).unwrap();
        let fam = toy::one_d();
        let g = GuidanceSpec::unguided(&sched);
        let t = euler_solve(&fam, toy::TARGET_CLASS, &sched, &g, &[3.0]).unwrap();
        let want = fam
            .class(toy::TARGET_CLASS)
            .unwrap()
            .ideal_denoise(&[3.0], NoiseLevel::new(5.0).unwrap())
            .unwrap()[0];
        assert!((t.terminal()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn zero_drift_fixture_agrees_across_solvers() {
        let fam = single(0.75, 1.0);
        let sched = edm(12);
        let g = GuidanceSpec::unguided(&sched);
        let h = heun_solve(&fam, "g", &sched, &g, &[0.75]).unwrap();
        let e = euler_solve(&fam, "g", &sched, &g, &[0.75]).unwrap();
        for (a, b) in h.states.iter().zip(&e.states) {
            assert!((a[0] - 0.75).abs() < 1e-14 && (b[0] - 0.75).abs() < 1e-14);
        }
    }

    #[test]
    fn profile_length_is_checked() {
        let sched = edm(8);
        assert!(custom_weight_profile(&sched, vec![1.0; 7]).is_err());
        assert!(custom_weight_profile(&sched, vec![f64::NAN; 8]).is_err());
        let p = custom_weight_profile(&sched, vec![1.0; 8]).unwrap();
        assert_eq!(p.guided_steps(), 0);
    }

    #[test]
    fn divergence_reports_step() {
        let sched = edm(8);
        let fam = toy::one_d();
        let g = GuidanceSpec::constant(&sched, 1e308).unwrap();
        let err = heun_solve(&fam, toy::TARGET_CLASS, &sched, &g, &[1.0]).unwrap_err();
        assert!(matches!(err, Error::SolverDivergence { chain: None, .. }), "{err}");
        let err = sample_batch(&fam, toy::TARGET_CLASS, &sched, &g, Solver::Heun, 3, 0).unwrap_err();
        assert!(matches!(err, Error::SolverDivergence { chain: Some(0), .. }), "{err}");
    }

    #[test]
    fn batches_are_partition_independent() {
        let sched = edm(16);
        let fam = toy::two_d();
        let ode = GuidedOde::new(&fam, toy::TARGET_CLASS, &sched, Solver::Heun).unwrap();
        let g = GuidanceSpec::interval(&sched, 2.5, 0.3, 3.0).unwrap();
        let (whole, nfe) = ode.sample_range(&g, 0..50, 4).unwrap();
        let (a, na) = ode.sample_range(&g, 0..17, 4).unwrap();
        let (b, nb) = ode.sample_range(&g, 17..50, 4).unwrap();
        assert_eq!(whole, [a, b].concat());
        assert_eq!(nfe, na + nb);
        assert_eq!(nfe, g.nfe(Solver::Heun).scaled(50));
        let again = ode.sample_batch(&g, 50, 4, toy::TARGET_CLASS).unwrap();
        assert_eq!(again.as_slice(), &whole[..]);
    }
}
