//! Noise-level discretizations and step-boundary snapping.
//!
//! A [`NoiseSchedule`] holds `σ_0 > σ_1 > … > σ_{N−1} > σ_N = 0`. Step `a`
//! is the transition `σ_a → σ_{a+1}`, so a schedule of `N` steps stores
//! `N + 1` levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::NoiseLevel;

/// Parameters of the power-warped ("ρ") discretization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoScheduleParams {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub steps: usize,
}

impl RhoScheduleParams {
    /// `σ_min = 0.002`, `σ_max = 80`, `ρ = 7`.
    pub fn edm(steps: usize) -> Self {
        RhoScheduleParams {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            steps,
        }
    }

    /// Endpoints that reproduce the listed SD-XL levels (14.61, 13.41, 12.28, …, 0.03)
    /// with `ρ = 3`.
    pub fn sdxl(steps: usize) -> Self {
        RhoScheduleParams {
            sigma_min: 0.0292,
            sigma_max: 14.61,
            rho: 3.0,
            steps,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.sigma_min.is_finite()
            && self.sigma_max.is_finite()
            && self.rho.is_finite()
            && self.sigma_min > 0.0
            && self.sigma_max > self.sigma_min
            && self.rho > 0.0
            && self.steps >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::input(format!(
                "rho schedule needs 0 < sigma_min < sigma_max, rho > 0, steps >= 2; got {self:?}"
            )))
        }
    }
}

/// Parameters of the iDDPM-style discretization built from a cosine `ᾱ` table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IddpmScheduleParams {
    pub c1: f64,
    pub c2: f64,
    pub m: usize,
    pub j0: usize,
    pub steps: usize,
}

impl IddpmScheduleParams {
    /// `C1 = 0.001`, `C2 = 0.008`, `M = 1000`, `j0 = 0`.
    pub fn defaults(steps: usize) -> Self {
        IddpmScheduleParams {
            c1: 0.001,
            c2: 0.008,
            m: 1000,
            j0: 0,
            steps,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.c1.is_finite() && self.c1 > 0.0 && self.c2.is_finite() && self.c2 > -1.0;
        if !ok || self.m < 2 || self.j0 >= self.m || self.steps < 2 {
            return Err(Error::input(format!(
                "iddpm schedule needs C1 > 0, C2 > -1, M >= 2, 0 <= j0 < M, steps >= 2; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// The rule that generated a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum ScheduleRule {
    Rho(RhoScheduleParams),
    Iddpm(IddpmScheduleParams),
}

impl ScheduleRule {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self {
            ScheduleRule::Rho(p) => rho_schedule(p),
            ScheduleRule::Iddpm(p) => iddpm_schedule(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
    rule: ScheduleRule,
}

impl NoiseSchedule {
    /// Checks the schedule invariants: strictly decreasing, finite, last value exactly zero.
    pub fn from_sigmas(sigmas: Vec<f64>, rule: ScheduleRule) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(Error::input("a schedule needs at least two levels"));
        }
        if sigmas.last() != Some(&0.0) {
            return Err(Error::input("a schedule must end at sigma = 0"));
        }
        if sigmas.iter().any(|s| !s.is_finite()) || sigmas.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Internal("schedule is not strictly decreasing".into()));
        }
        Ok(NoiseSchedule { sigmas, rule })
    }

    /// `σ_0 … σ_N`.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn rule(&self) -> &ScheduleRule {
        &self.rule
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigmas[i]
    }

    pub fn level(&self, i: usize) -> NoiseLevel {
        NoiseLevel::new_unchecked(self.sigmas[i])
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[0]
    }

    /// Snap a requested interval `(σ_lo, σ_hi]` onto step boundaries.
    ///
    /// `σ_hi` rounds down to the largest schedule level `≤ σ_hi` (index `i`,
    /// `0` when `σ_hi ≥ σ_0`) and `σ_lo` rounds to the largest level `≤ σ_lo`
    /// (index `j`, `N` when `σ_lo = 0`). The snapped interval `(σ_j, σ_i]`
    /// contains exactly the step start levels that `(σ_lo, σ_hi]` contains,
    /// so snapping never changes which steps are guided.
    pub fn snap_interval(&self, sigma_lo: f64, sigma_hi: f64) -> Result<SnappedInterval> {
        if sigma_lo.is_nan() || sigma_hi.is_nan() || sigma_lo < 0.0 || sigma_lo.is_infinite() {
            return Err(Error::input(format!(
                "interval bounds must satisfy 0 <= sigma_lo < sigma_hi, got ({sigma_lo}, {sigma_hi}]"
            )));
        }
        if sigma_lo >= sigma_hi {
            return Err(Error::input(format!(
                "sigma_lo ({sigma_lo}) must be below sigma_hi ({sigma_hi})"
            )));
        }
        let n = self.steps();
        // Levels are decreasing: the first index whose level is <= sigma_hi.
        let hi = self.sigmas.partition_point(|&s| s > sigma_hi);
        // The first index whose level is <= sigma_lo.
        let lo = self.sigmas.partition_point(|&s| s > sigma_lo);
        debug_assert!(hi <= n && lo <= n);
        Ok(SnappedInterval::from_indices(hi, lo))
    }

    /// Number of steps whose starting level lies in `(σ_lo, σ_hi]`.
    pub fn steps_inside(&self, interval: SnappedInterval) -> usize {
        match interval {
            SnappedInterval::Empty => 0,
            SnappedInterval::Steps { hi, lo } => lo - hi,
        }
    }
}

/// A guidance interval expressed as schedule indices.
///
/// `Steps { hi, lo }` means `(σ_lo_index, σ_hi_index]` with `hi < lo`; the
/// guided steps are `hi..lo`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SnappedInterval {
    Empty,
    Steps { hi: usize, lo: usize },
}

impl SnappedInterval {
    pub fn from_indices(hi: usize, lo: usize) -> Self {
        if hi < lo {
            SnappedInterval::Steps { hi, lo }
        } else {
            SnappedInterval::Empty
        }
    }

    /// Whether step `a` (starting at `σ_a`) lies inside.
    pub fn contains_step(&self, a: usize) -> bool {
        match *self {
            SnappedInterval::Empty => false,
            SnappedInterval::Steps { hi, lo } => hi <= a && a < lo,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, SnappedInterval::Empty)
    }
}

/// `σ_i = (σ_max^{1/ρ} + i/(N−1) (σ_min^{1/ρ} − σ_max^{1/ρ}))^ρ` for
/// `i = 0 … N−1`, then `σ_N = 0`.
pub fn rho_schedule(params: &RhoScheduleParams) -> Result<NoiseSchedule> {
    params.validate()?;
    let n = params.steps;
    let inv = 1.0 / params.rho;
    let hi = params.sigma_max.powf(inv);
    let lo = params.sigma_min.powf(inv);
    let mut sigmas: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            (hi + t * (lo - hi)).powf(params.rho)
        })
        .collect();
    // Endpoints exactly, not up to powf round-trip.
    sigmas[0] = params.sigma_max;
    sigmas[n - 1] = params.sigma_min;
    sigmas.push(0.0);
    NoiseSchedule::from_sigmas(sigmas, ScheduleRule::Rho(*params))
}

/// `ᾱ_j = sin²(π/2 · j / (M (C2 + 1)))`.
pub fn alpha_bar(j: usize, params: &IddpmScheduleParams) -> f64 {
    let t = std::f64::consts::FRAC_PI_2 * j as f64 / (params.m as f64 * (params.c2 + 1.0));
    let s = t.sin();
    s * s
}

/// The table `u_0 … u_M` with `u_M = 0` and
/// `u_{j−1} = √((u_j² + 1) / max(ᾱ_{j−1}/ᾱ_j, C1) − 1)`.
pub fn iddpm_u_table(params: &IddpmScheduleParams) -> Result<Vec<f64>> {
    params.validate()?;
    let m = params.m;
    let mut u = vec![0.0; m + 1];
    for j in (1..=m).rev() {
        let ratio = alpha_bar(j - 1, params) / alpha_bar(j, params);
        u[j - 1] = ((u[j] * u[j] + 1.0) / ratio.max(params.c1) - 1.0).sqrt();
    }
    if u.iter().any(|v| !v.is_finite()) || u.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Internal(
            "iddpm u table is not strictly decreasing; parameters are outside the valid regime".into(),
        ));
    }
    Ok(u)
}

/// Index into the u table selected for step `i`:
/// `⌊j0 + (M − 1 − j0)/(N − 1) · i + 1/2⌋`, in exact integer arithmetic.
pub fn iddpm_index(i: usize, params: &IddpmScheduleParams) -> usize {
    let den = (params.steps - 1) as u128;
    let num = params.j0 as u128 * den + (params.m - 1 - params.j0) as u128 * i as u128;
    ((2 * num + den) / (2 * den)) as usize
}

/// `σ_i = u_{index(i)}` for `i = 0 … N−1`, then `σ_N = 0`.
pub fn iddpm_schedule(params: &IddpmScheduleParams) -> Result<NoiseSchedule> {
    let u = iddpm_u_table(params)?;
    let mut sigmas: Vec<f64> = (0..params.steps).map(|i| u[iddpm_index(i, params)]).collect();
    // u decreases in j and the index increases in i, so this is already
    // descending; sort anyway so orientation never depends on index arithmetic.
    sigmas.sort_by(|a, b| b.total_cmp(a));
    if sigmas.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Internal(format!(
            "iddpm selection repeats table entries: {} steps over {} table entries",
            params.steps,
            params.m - params.j0
        )));
    }
    sigmas.push(0.0);
    NoiseSchedule::from_sigmas(sigmas, ScheduleRule::Iddpm(*params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn edm_endpoints() {
        let s = rho_schedule(&RhoScheduleParams::edm(32)).unwrap();
        assert_eq!(s.sigmas().len(), 33);
        assert_eq!(s.sigma(0), 80.0);
        assert_eq!(s.sigma(31), 0.002);
        assert_eq!(s.sigma(32), 0.0);
    }

    #[test]
    fn sdxl_listed_levels() {
        let s = rho_schedule(&RhoScheduleParams::sdxl(32)).unwrap();
        for (i, want) in [(0, 14.61), (1, 13.41), (2, 12.28), (31, 0.03)] {
            assert!((s.sigma(i) - want).abs() <= 0.01, "sigma_{i} = {}", s.sigma(i));
        }
    }

    #[test]
    fn smallest_rho_schedule() {
        let p = RhoScheduleParams {
            sigma_min: 0.5,
            sigma_max: 3.0,
            rho: 7.0,
            steps: 2,
        };
        assert_eq!(rho_schedule(&p).unwrap().sigmas(), &[3.0, 0.5, 0.0]);
        assert!(rho_schedule(&RhoScheduleParams { steps: 1, ..p }).is_err());
        assert!(rho_schedule(&RhoScheduleParams { sigma_min: 4.0, ..p }).is_err());
    }

    #[test]
    fn alpha_bar_boundaries() {
        let p = IddpmScheduleParams::defaults(250);
        assert_eq!(alpha_bar(0, &p), 0.0);
        // ᾱ at j = M(C2 + 1) would be sin²(π/2) = 1.
        let full = std::f64::consts::FRAC_PI_2;
        assert!((full.sin().powi(2) - 1.0).abs() < 1e-15);
        // u_0 is finite thanks to the C1 guard on ᾱ_0/ᾱ_1 = 0.
        let u = iddpm_u_table(&p).unwrap();
        assert!(u[0].is_finite() && u[0] > u[1]);
        assert_eq!(u[p.m], 0.0);
    }

    #[test]
    fn iddpm_defaults_shape() {
        let s = iddpm_schedule(&IddpmScheduleParams::defaults(250)).unwrap();
        assert_eq!(s.sigmas().len(), 251);
        assert_eq!(s.sigma(250), 0.0);
    }

    #[test]
    fn iddpm_stride_one_is_table_segment() {
        let p = IddpmScheduleParams {
            j0: 10,
            steps: 990,
            ..IddpmScheduleParams::defaults(2)
        };
        let u = iddpm_u_table(&p).unwrap();
        let s = iddpm_schedule(&p).unwrap();
        for i in 0..p.steps {
            assert_eq!(iddpm_index(i, &p), p.j0 + i);
        }
        assert_eq!(&s.sigmas()[..p.steps], &u[p.j0..p.m]);
    }

    #[test]
    fn iddpm_rejects_oversampling() {
        let p = IddpmScheduleParams {
            m: 50,
            ..IddpmScheduleParams::defaults(80)
        };
        assert!(matches!(iddpm_schedule(&p), Err(Error::Internal(_))));
    }

    #[test]
    fn snap_full_range_recovers_cfg() {
        let s = rho_schedule(&RhoScheduleParams::edm(32)).unwrap();
        assert_eq!(
            s.snap_interval(0.0, f64::INFINITY).unwrap(),
            SnappedInterval::Steps { hi: 0, lo: 32 }
        );
    }

    #[test]
    fn snap_without_member_is_empty() {
        let s = rho_schedule(&RhoScheduleParams::edm(32)).unwrap();
        let a = s.sigma(10);
        let b = s.sigma(11);
        let hi = 0.5 * (a + b);
        assert_eq!(s.snap_interval(hi - 1e-9, hi).unwrap(), SnappedInterval::Empty);
        assert!(s.snap_interval(1.0, 1.0).is_err());
        assert!(s.snap_interval(-0.1, 1.0).is_err());
    }

    #[test]
    fn snap_matches_enumeration() {
        let s = rho_schedule(&RhoScheduleParams::edm(32)).unwrap();
        let (lo, hi) = (0.19, 1.61);
        let inside = (0..s.steps()).filter(|&a| lo < s.sigma(a) && s.sigma(a) <= hi).count();
        let snapped = s.snap_interval(lo, hi).unwrap();
        assert_eq!(s.steps_inside(snapped), inside);
        let SnappedInterval::Steps { hi: i, lo: j } = snapped else {
            panic!("expected non-empty")
        };
        assert!(s.sigma(i) <= hi && s.sigma(j) <= lo);
    }

    fn schedule_strategy() -> impl Strategy<Value = RhoScheduleParams> {
        (1e-4f64..1.0, 1.5f64..500.0, 0.5f64..10.0, 2usize..200).prop_map(|(min, ratio, rho, steps)| {
            RhoScheduleParams {
                sigma_min: min,
                sigma_max: min * ratio,
                rho,
                steps,
            }
        })
    }

    proptest! {
        #[test]
        fn rho_is_strictly_decreasing(p in schedule_strategy()) {
            let s = rho_schedule(&p).unwrap();
            prop_assert!(s.sigmas().windows(2).all(|w| w[0] > w[1]));
            prop_assert!((s.sigma(0) - p.sigma_max).abs() <= 1e-12 * p.sigma_max);
            prop_assert!((s.sigma(p.steps - 1) - p.sigma_min).abs() <= 1e-12 * p.sigma_min);
        }

        #[test]
        fn refining_nests_levels(p in schedule_strategy()) {
            let coarse = rho_schedule(&p).unwrap();
            let fine = rho_schedule(&RhoScheduleParams { steps: 2 * p.steps - 1, ..p }).unwrap();
            for i in 0..p.steps {
                let (a, b) = (coarse.sigma(i), fine.sigma(2 * i));
                prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
            }
        }

        #[test]
        fn snapping_shrinks_and_is_idempotent(p in schedule_strategy(), u in 0.0f64..1.0, v in 0.0f64..1.0, inf in any::<bool>()) {
            let s = rho_schedule(&p).unwrap();
            let top = s.sigma_max() * 1.2;
            let (mut lo, hi) = if u < v { (u * top, v * top) } else { (v * top, u * top) };
            if lo == hi { return Ok(()); }
            if u < 0.1 { lo = 0.0; }
            let hi = if inf { f64::INFINITY } else { hi };
            match s.snap_interval(lo, hi).unwrap() {
                SnappedInterval::Empty => {
                    prop_assert!((0..s.steps()).all(|a| !(lo < s.sigma(a) && s.sigma(a) <= hi)));
                }
                SnappedInterval::Steps { hi: i, lo: j } => {
                    prop_assert!(i < j);
                    prop_assert!(s.sigma(i) <= hi && s.sigma(j) <= lo);
                    for a in 0..s.steps() {
                        let want = lo < s.sigma(a) && s.sigma(a) <= hi;
                        prop_assert_eq!(SnappedInterval::Steps { hi: i, lo: j }.contains_step(a), want);
                    }
                    prop_assert_eq!(
                        s.snap_interval(s.sigma(j), s.sigma(i)).unwrap(),
                        SnappedInterval::Steps { hi: i, lo: j }
                    );
                }
            }
        }
    }
}
