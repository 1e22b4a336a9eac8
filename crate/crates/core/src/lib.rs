//! Classifier-free guidance restricted to a noise-level interval, studied with
//! exact denoisers for Gaussian-mixture data.
//!
//! The crate is organized bottom-up:
//!
//! * [`mixture`]: Gaussian mixtures, their noise-smoothed densities and
//!   closed-form denoisers.
//! * [`schedule`]: ρ-warped and iDDPM noise-level discretizations, and
//!   snapping of guidance intervals onto step boundaries.
//! * [`sampler`]: Euler and Heun solvers of the guided probability-flow ODE
//!   with per-step weights and denoiser-evaluation accounting.
//! * [`metrics`]: Fréchet distance, Wasserstein-1, k-NN precision/recall,
//!   mode masses and histogram KL, all in data space.
//! * [`search`]: grid sweeps, the decoupled two-phase interval search,
//!   discrete golden-section refinement, reduced-sample screening and the
//!   per-step ablation.
//! * [`plot`]: deterministic SVG figures.
//!
//! ```
//! use guidance_interval::prelude::*;
//!
//! let family = toy::one_d();
//! let schedule = rho_schedule(&RhoScheduleParams::edm(32)).unwrap();
//! let guidance = GuidanceSpec::interval(&schedule, 3.0, 0.28, 5.42).unwrap();
//! let batch = sample_batch(&family, toy::TARGET_CLASS, &schedule, &guidance, Solver::Heun, 100, 7).unwrap();
//! assert_eq!(batch.len(), 100);
//! ```

pub mod batch;
pub mod config;
pub mod error;
pub mod io;
pub mod metrics;
pub mod mixture;
pub mod plot;
pub mod problem;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod search;
pub mod toy;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::batch::SampleBatch;
    pub use crate::error::{Error, Result};
    pub use crate::metrics::{
        frechet_distance, kl_histogram, knn_precision_recall, mode_masses, wasserstein1_1d, MetricOptions,
        MetricsReport,
    };
    pub use crate::mixture::{Class, Component, ConditionedFamily, GaussianMixture, NoiseLevel};
    pub use crate::sampler::{
        custom_weight_profile, drift, euler_solve, heun_solve, sample_batch, GuidanceSpec, GuidedOde, Nfe, Solver,
        Trajectory,
    };
    pub use crate::schedule::{
        iddpm_schedule, rho_schedule, IddpmScheduleParams, NoiseSchedule, RhoScheduleParams, ScheduleRule,
        SnappedInterval,
    };
    pub use crate::toy;
}
