//! A sampling problem: a class-conditional family, the class to generate,
//! and how imperfect the model's conditioning is.
//!
//! The model samples from `family.with_leak(leak)`; metrics compare against
//! the exact class mixture of the un-leaked family.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{ConditionedFamily, GaussianMixture};
use crate::toy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub class: String,
    #[serde(default)]
    pub leak: f64,
    pub family: ConditionedFamily,
}

impl Problem {
    pub fn new(family: ConditionedFamily, class: &str, leak: f64) -> Result<Self> {
        family.class(class)?;
        family.with_leak(leak)?;
        Ok(Problem {
            class: class.to_string(),
            leak,
            family,
        })
    }

    /// The one-dimensional toy with a perfect model.
    pub fn one_d() -> Self {
        Problem::new(toy::one_d(), toy::TARGET_CLASS, 0.0).expect("toy problem is valid")
    }

    /// The two-dimensional toy with the leaky model the sweeps are tuned on.
    pub fn two_d_leaky() -> Self {
        Problem::new(toy::two_d(), toy::TARGET_CLASS, toy::IMPERFECT_LEAK).expect("toy problem is valid")
    }

    /// Family the sampler actually uses.
    pub fn model(&self) -> Result<ConditionedFamily> {
        self.family.with_leak(self.leak)
    }

    /// Exact distribution of the target class.
    pub fn reference(&self) -> Result<&GaussianMixture> {
        self.family.class(&self.class)
    }

    pub fn dim(&self) -> usize {
        self.family.dim()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.family.class(&self.class).is_err() {
            return Err(Error::input(format!("unknown class {:?}", self.class)));
        }
        self.family.with_leak(self.leak).map(|_| ())
    }
}
