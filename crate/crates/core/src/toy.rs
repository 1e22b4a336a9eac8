//! Canonical toy problems.
//!
//! The one-dimensional family has two classes: `"A"`, a single narrow mode on
//! the left, and `"B"`, the target class, with a minority mode near `A` and a
//! majority mode on the right. Guidance toward `B` pushes samples away from
//! `A`, and at high noise levels that push is strong enough to sweep the
//! minority mode away entirely.
//!
//! The two-dimensional family places the same arrangement along a diagonal
//! and adds a third, diffuse class `"C"` centred at the origin. Leaking
//! conditioning toward `C` scatters outliers everywhere, which is the defect
//! guidance is meant to repair in the sweeps.

use crate::mixture::{Class, Component, ConditionedFamily, GaussianMixture};

/// Class label that guided sampling targets in the toy families.
pub const TARGET_CLASS: &str = "B";

/// True weight of the minority mode of the target class.
pub const MINORITY_MASS: f64 = 0.3;

/// Index of the minority component inside the target class mixture.
pub const MINORITY_COMPONENT: usize = 0;

/// Conditioning leak of the "imperfect denoiser" variant used by the sweeps.
pub const IMPERFECT_LEAK: f64 = 0.2;

fn class(label: &str, prior: f64, comps: Vec<Component>) -> Class {
    Class {
        label: label.into(),
        prior,
        mixture: GaussianMixture::new(comps).expect("toy mixture is valid"),
    }
}

/// The one-dimensional two-class toy.
pub fn one_d() -> ConditionedFamily {
    ConditionedFamily::new(vec![
        class("A", 0.5, vec![Component::new(1.0, vec![-3.5], vec![0.09])]),
        class(
            TARGET_CLASS,
            0.5,
            vec![
                Component::new(MINORITY_MASS, vec![-1.0], vec![0.09]),
                Component::new(1.0 - MINORITY_MASS, vec![2.0], vec![0.16]),
            ],
        ),
    ])
    .expect("toy family is valid")
}

/// The two-dimensional toy.
pub fn two_d() -> ConditionedFamily {
    ConditionedFamily::new(vec![
        class("A", 0.4, vec![Component::new(1.0, vec![-2.0, -2.0], vec![0.09, 0.09])]),
        class(
            TARGET_CLASS,
            0.4,
            vec![
                Component::new(MINORITY_MASS, vec![-0.5, -0.5], vec![0.04, 0.04]),
                Component::new(1.0 - MINORITY_MASS, vec![1.5, 1.5], vec![0.16, 0.16]),
            ],
        ),
        class("C", 0.2, vec![Component::new(1.0, vec![0.0, 0.0], vec![4.0, 4.0])]),
    ])
    .expect("toy family is valid")
}
