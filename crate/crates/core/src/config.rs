//! TOML run configuration.
//!
//! A config file may leave out anything that has a default. [`RunConfig::load`]
//! resolves it: toy names and family files become inline class lists,
//! schedule presets become explicit parameters, profile files become inline
//! weights and every default is filled in. [`RunConfig::to_toml`] writes the
//! resolved form, which loads back to an identical config.
//!
//! ```toml
//! seed = 0
//! n = 1000
//! solver = "heun"
//!
//! [problem]
//! toy = "one_d"        # or: file = "family.toml", or inline [[problem.classes]]
//! class = "B"
//! leak = 0.0
//!
//! [schedule]
//! rule = "edm"         # edm | sdxl | rho | iddpm
//! steps = 32
//!
//! [guidance]
//! w = 3.0
//! sigma_lo = 0.28
//! sigma_hi = 5.42      # or: profile = [...] / profile_file = "w.csv"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{DEFAULT_BINS, DEFAULT_K};
use crate::mixture::ConditionedFamily;
use crate::plot::PlotSpec;
use crate::problem::Problem;
use crate::sampler::{GuidanceSpec, Solver};
use crate::schedule::{IddpmScheduleParams, NoiseSchedule, RhoScheduleParams, ScheduleRule};
use crate::search::{Metric, PhaseStrategy, SweepGrid, TwoPhaseOptions, DEFAULT_SHORTLIST};
use crate::toy;

pub const DEFAULT_N: usize = 1000;
pub const DEFAULT_TRAJECTORIES: usize = 64;

/// The `[problem]` table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default)]
    pub leak: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<toml::Value>,
}

/// The `[schedule]` table. Presets fill in whichever parameters are left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "default_rule")]
    pub rule: String,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub j0: Option<usize>,
}

fn default_rule() -> String {
    "edm".into()
}

fn default_steps() -> usize {
    32
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            rule: default_rule(),
            steps: default_steps(),
            sigma_min: None,
            sigma_max: None,
            rho: None,
            c1: None,
            c2: None,
            m: None,
            j0: None,
        }
    }
}

impl ScheduleSection {
    pub fn rule(&self) -> Result<ScheduleRule> {
        let rho = |base: RhoScheduleParams| {
            ScheduleRule::Rho(RhoScheduleParams {
                sigma_min: self.sigma_min.unwrap_or(base.sigma_min),
                sigma_max: self.sigma_max.unwrap_or(base.sigma_max),
                rho: self.rho.unwrap_or(base.rho),
                steps: self.steps,
            })
        };
        let iddpm_keys = self.c1.is_some() || self.c2.is_some() || self.m.is_some() || self.j0.is_some();
        let rho_keys = self.sigma_min.is_some() || self.sigma_max.is_some() || self.rho.is_some();
        match self.rule.as_str() {
            "edm" | "rho" | "sdxl" if iddpm_keys => Err(Error::input("c1, c2, m and j0 belong to the iddpm rule")),
            "edm" | "rho" => Ok(rho(RhoScheduleParams::edm(self.steps))),
            "sdxl" => Ok(rho(RhoScheduleParams::sdxl(self.steps))),
            "iddpm" if rho_keys => Err(Error::input("sigma_min, sigma_max and rho belong to rho rules")),
            "iddpm" => {
                let d = IddpmScheduleParams::defaults(self.steps);
                Ok(ScheduleRule::Iddpm(IddpmScheduleParams {
                    c1: self.c1.unwrap_or(d.c1),
                    c2: self.c2.unwrap_or(d.c2),
                    m: self.m.unwrap_or(d.m),
                    j0: self.j0.unwrap_or(d.j0),
                    steps: self.steps,
                }))
            }
            other => Err(Error::input(format!(
                "unknown schedule rule {other:?}; expected edm, sdxl, rho or iddpm"
            ))),
        }
    }

    fn resolved(rule: &ScheduleRule) -> Self {
        match *rule {
            ScheduleRule::Rho(p) => ScheduleSection {
                rule: "rho".into(),
                steps: p.steps,
                sigma_min: Some(p.sigma_min),
                sigma_max: Some(p.sigma_max),
                rho: Some(p.rho),
                ..ScheduleSection::default()
            },
            ScheduleRule::Iddpm(p) => ScheduleSection {
                rule: "iddpm".into(),
                steps: p.steps,
                c1: Some(p.c1),
                c2: Some(p.c2),
                m: Some(p.m),
                j0: Some(p.j0),
                ..ScheduleSection::default()
            },
        }
    }
}

/// The `[guidance]` table: an interval, or one weight per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    #[serde(default = "default_w")]
    pub w: f64,
    #[serde(default)]
    pub sigma_lo: f64,
    #[serde(default = "infinity")]
    pub sigma_hi: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile_file: Option<PathBuf>,
}

fn default_w() -> f64 {
    1.0
}

fn infinity() -> f64 {
    f64::INFINITY
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            w: default_w(),
            sigma_lo: 0.0,
            sigma_hi: infinity(),
            profile: None,
            profile_file: None,
        }
    }
}

impl GuidanceSection {
    pub fn spec(&self, schedule: &NoiseSchedule) -> Result<GuidanceSpec> {
        match &self.profile {
            Some(p) => GuidanceSpec::custom_profile(schedule, p.clone()),
            None => GuidanceSpec::interval(schedule, self.w, self.sigma_lo, self.sigma_hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            k: DEFAULT_K,
            bins: DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    /// Chains whose full trajectories are written.
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
}

fn default_trajectories() -> usize {
    DEFAULT_TRAJECTORIES
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            trajectories: DEFAULT_TRAJECTORIES,
        }
    }
}

/// Screening stage of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreenSection {
    pub n_small: usize,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
}

fn default_fraction() -> f64 {
    DEFAULT_SHORTLIST
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hi: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lo: Option<Vec<usize>>,
    #[serde(default)]
    pub metric: Metric,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_cells: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub screen: Option<ScreenSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    #[serde(default = "default_search_w")]
    pub w: f64,
    #[serde(default)]
    pub metric: Metric,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hi: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lo: Option<Vec<usize>>,
    #[serde(default)]
    pub strategy: StrategyName,
    /// Coarse-scan stride of the bisection strategy.
    #[serde(default = "default_stride")]
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyName {
    #[default]
    Scan,
    Bisection,
}

fn default_stride() -> usize {
    4
}

fn default_search_w() -> f64 {
    3.0
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            w: default_search_w(),
            metric: Metric::default(),
            n: None,
            hi: None,
            lo: None,
            strategy: StrategyName::default(),
            stride: default_stride(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    #[serde(default = "default_search_w")]
    pub w: f64,
    #[serde(default)]
    pub metric: Metric,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            w: default_search_w(),
            metric: Metric::default(),
            n: None,
        }
    }
}

/// A run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub solver: Solver,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub problem: ProblemSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub guidance: GuidanceSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub ablate: AblateSection,
    #[serde(default)]
    pub plot: PlotSpec,
}

fn default_n() -> usize {
    DEFAULT_N
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config parses")
    }
}

impl RunConfig {
    /// Read and resolve a config file; relative paths inside it are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::input(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse(&text, base)
    }

    /// Parse and resolve config text.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let raw: RunConfig = toml::from_str(text)?;
        raw.resolve(base)
    }

    /// Materialize every default and inline every referenced file.
    pub fn resolve(mut self, base: &Path) -> Result<Self> {
        if self.n == 0 {
            return Err(Error::input("n must be >= 1"));
        }
        let problem = self.build_problem(base)?;
        self.problem = ProblemSection {
            toy: None,
            file: None,
            class: Some(problem.class.clone()),
            leak: problem.leak,
            classes: Some(family_value(&problem.family)?),
        };

        let rule = self.schedule.rule()?;
        let schedule = rule.build()?;
        self.schedule = ScheduleSection::resolved(&rule);

        if let Some(file) = self.guidance.profile_file.take() {
            if self.guidance.profile.is_some() {
                return Err(Error::input("give either profile or profile_file, not both"));
            }
            let path = base.join(&file);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::input(format!("cannot read profile {}: {e}", path.display())))?;
            self.guidance.profile = Some(io::read_profile_csv(&text)?);
        }
        self.guidance.spec(&schedule)?;

        let steps = schedule.steps();
        let default_grid = SweepGrid::default_for(&schedule, self.sweep.metric, self.n, self.seed);
        self.sweep.w.get_or_insert(default_grid.w);
        self.sweep.hi.get_or_insert(default_grid.hi);
        self.sweep.lo.get_or_insert(default_grid.lo);
        self.sweep.n.get_or_insert(self.n);
        self.search.n.get_or_insert(self.n);
        self.search.hi.get_or_insert_with(|| (0..steps).collect());
        self.search.lo.get_or_insert_with(|| (1..=steps).collect());
        self.ablate.n.get_or_insert(self.n);
        if self.search.stride == 0 {
            return Err(Error::input("search.stride must be >= 1"));
        }
        self.plot.validate()?;
        Ok(self)
    }

    fn build_problem(&self, base: &Path) -> Result<Problem> {
        let p = &self.problem;
        let sources = [p.toy.is_some(), p.file.is_some(), p.classes.is_some()];
        let family = match sources {
            [false, false, false] => toy::one_d(),
            [true, false, false] => match p.toy.as_deref() {
                Some("one_d") => toy::one_d(),
                Some("two_d") => toy::two_d(),
                Some(other) => return Err(Error::input(format!("unknown toy {other:?}; expected one_d or two_d"))),
                None => unreachable!(),
            },
            [false, true, false] => {
                let path = base.join(p.file.as_ref().expect("checked"));
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::input(format!("cannot read family {}: {e}", path.display())))?;
                toml::from_str::<ConditionedFamily>(&text)?
            }
            [false, false, true] => {
                let mut t = toml::Table::new();
                t.insert("classes".into(), p.classes.clone().expect("checked"));
                t.try_into::<ConditionedFamily>()?
            }
            _ => return Err(Error::input("give exactly one of problem.toy, problem.file or problem.classes")),
        };
        let class = p.class.clone().unwrap_or_else(|| toy::TARGET_CLASS.to_string());
        Problem::new(family, &class, p.leak)
    }

    /// The resolved problem.
    pub fn problem(&self) -> Result<Problem> {
        self.build_problem(Path::new("."))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.rule()?.build()
    }

    pub fn guidance(&self, schedule: &NoiseSchedule) -> Result<GuidanceSpec> {
        self.guidance.spec(schedule)
    }

    pub fn sweep_grid(&self) -> SweepGrid {
        SweepGrid {
            w: self.sweep.w.clone().unwrap_or_default(),
            hi: self.sweep.hi.clone().unwrap_or_default(),
            lo: self.sweep.lo.clone().unwrap_or_default(),
            metric: self.sweep.metric,
            n: self.sweep.n.unwrap_or(self.n),
            seed: self.seed,
        }
    }

    pub fn two_phase_options(&self) -> TwoPhaseOptions {
        TwoPhaseOptions {
            hi: self.search.hi.clone(),
            lo: self.search.lo.clone(),
            metric: self.search.metric,
            n: self.search.n.unwrap_or(self.n),
            seed: self.seed,
            strategy: match self.search.strategy {
                StrategyName::Scan => PhaseStrategy::Scan,
                StrategyName::Bisection => PhaseStrategy::Bisection {
                    stride: self.search.stride,
                },
            },
        }
    }

    /// The resolved config as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("config does not serialize: {e}")))
    }
}

fn family_value(family: &ConditionedFamily) -> Result<toml::Value> {
    let v = toml::Value::try_from(family).map_err(|e| Error::Internal(e.to_string()))?;
    v.get("classes")
        .cloned()
        .ok_or_else(|| Error::Internal("family has no classes".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_resolves_to_defaults() {
        let c = RunConfig::parse("", Path::new(".")).unwrap();
        assert_eq!(c.n, DEFAULT_N);
        assert_eq!(c.solver, Solver::Heun);
        assert_eq!(c.schedule().unwrap().steps(), 32);
        assert_eq!(c.problem().unwrap(), Problem::one_d());
        assert_eq!(c.sweep_grid().w.len(), 21);
    }

    #[test]
    fn resolved_config_reloads_identically() {
        let text = r#"
            seed = 7
            n = 200
            [problem]
            toy = "two_d"
            leak = 0.2
            [schedule]
            rule = "sdxl"
            steps = 16
            [guidance]
            w = 2.5
            sigma_hi = 3.0
            [search]
            strategy = "bisection"
            stride = 3
        "#;
        let c = RunConfig::parse(text, Path::new(".")).unwrap();
        let again = RunConfig::parse(&c.to_toml().unwrap(), Path::new(".")).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.two_phase_options().strategy, PhaseStrategy::Bisection { stride: 3 });
    }

    #[test]
    fn rejects_unknown_keys_and_mixed_sources() {
        assert!(RunConfig::parse("sed = 1", Path::new(".")).is_err());
        assert!(RunConfig::parse("[problem]\ntoy = \"one_d\"\nfile = \"x.toml\"", Path::new(".")).is_err());
        assert!(RunConfig::parse("[schedule]\nrule = \"iddpm\"\nrho = 3", Path::new(".")).is_err());
        assert!(RunConfig::parse("[guidance]\nw = 2\nsigma_lo = 5\nsigma_hi = 1", Path::new(".")).is_err());
    }
}
