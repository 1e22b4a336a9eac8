//! Gaussian-mixture data distributions and their exact denoisers.
//!
//! A mixture `p(x) = Σ_k w_k N(x; μ_k, diag(v_k))` convolved with isotropic
//! noise of standard deviation `σ` stays a mixture with variances `v_k + σ²`.
//! That closed form gives everything the sampler needs: the smoothed density,
//! the posterior-mean denoiser `E[y | y + n = x]` and the score.
//!
//! All responsibilities are accumulated in the log domain with a running
//! maximum, so nothing underflows when `σ` ranges over several decades.


use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::SampleBatch;
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Largest dimension accepted by the library.
pub const MAX_DIM: usize = 8;

/// Standard deviation of the Gaussian noise added to data.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub const ZERO: NoiseLevel = NoiseLevel(0.0);

    pub fn new(sigma: f64) -> Result<Self> {
        if sigma.is_finite() && sigma >= 0.0 {
            Ok(NoiseLevel(sigma))
        } else {
            Err(Error::input(format!("noise level must be finite and >= 0, got {sigma}")))
        }
    }

    /// Caller guarantees `sigma` is finite and non-negative.
    pub(crate) fn new_unchecked(sigma: f64) -> Self {
        debug_assert!(sigma.is_finite() && sigma >= 0.0);
        NoiseLevel(sigma)
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// One diagonal Gaussian of a mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Per-axis variances.
    pub variance: Vec<f64>,
}

impl Component {
    pub fn new(weight: f64, mean: Vec<f64>, variance: Vec<f64>) -> Self {
        Component {
            weight,
            mean,
            variance,
        }
    }

    /// `ln N(x; μ, diag(v + σ²))` where `sigma_sq = σ²`.
    fn log_density(&self, x: &[f64], sigma_sq: f64) -> f64 {
        let mut acc = 0.0;
        for ((&xi, &mi), &vi) in x.iter().zip(&self.mean).zip(&self.variance) {
            let v = vi + sigma_sq;
            let d = xi - mi;
            if v == 0.0 {
                // point mass
                if d == 0.0 {
                    return f64::INFINITY;
                }
                return f64::NEG_INFINITY;
            }
            acc -= 0.5 * (LN_2PI + v.ln() + d * d / v);
        }
        acc
    }
}

#[derive(Deserialize)]
struct RawMixture {
    components: Vec<Component>,
}

/// A finite mixture of diagonal Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture")]
pub struct GaussianMixture {
    #[serde(skip)]
    dim: usize,
    components: Vec<Component>,
}

impl TryFrom<RawMixture> for GaussianMixture {
    type Error = Error;

    fn try_from(raw: RawMixture) -> Result<Self> {
        GaussianMixture::new(raw.components)
    }
}

impl GaussianMixture {
    /// Validates weights (positive, summing to one within 1e-12), variances
    /// (non-negative) and dimensions (all equal, between 1 and [`MAX_DIM`]).
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::input("a mixture needs at least one component"))?;
        let dim = first.mean.len();
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::input(format!("dimension must be in 1..={MAX_DIM}, got {dim}")));
        }
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.variance.len() != dim {
                return Err(Error::input(format!(
                    "component {k}: mean/variance length differs from dimension {dim}"
                )));
            }
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return Err(Error::input(format!("component {k}: weight must be > 0")));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::input(format!("component {k}: mean must be finite")));
            }
            if c.variance.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::input(format!("component {k}: variances must be finite and >= 0")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::input(format!("weights sum to {total}, expected 1")));
        }
        Ok(GaussianMixture { dim, components })
    }

    /// Single-component convenience constructor.
    pub fn gaussian(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        GaussianMixture::new(vec![Component::new(1.0, mean, variance)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Mixture mean `Σ_k w_k μ_k`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for c in &self.components {
            for (mi, &ci) in m.iter_mut().zip(&c.mean) {
                *mi += c.weight * ci;
            }
        }
        m
    }

    /// The same mixture with every variance increased by `σ²`.
    pub fn convolved(&self, sigma: NoiseLevel) -> GaussianMixture {
        let s2 = sigma.get() * sigma.get();
        GaussianMixture {
            dim: self.dim,
            components: self
                .components
                .iter()
                .map(|c| Component {
                    weight: c.weight,
                    mean: c.mean.clone(),
                    variance: c.variance.iter().map(|v| v + s2).collect(),
                })
                .collect(),
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::input(format!(
                "vector has length {}, mixture dimension is {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// `ln p(x; σ)`.
    pub fn log_smoothed_density(&self, x: &[f64], sigma: NoiseLevel) -> Result<f64> {
        self.check_dim(x)?;
        let s2 = sigma.get() * sigma.get();
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for c in &self.components {
            let l = c.weight.ln() + c.log_density(x, s2);
            accumulate(&mut max, &mut sum, l, |_| {});
        }
        Ok(if sum == 0.0 { f64::NEG_INFINITY } else { max + sum.ln() })
    }

    /// Density of the data convolved with `N(0, σ² I)` at `x`.
    pub fn smoothed_density(&self, x: &[f64], sigma: NoiseLevel) -> Result<f64> {
        Ok(self.log_smoothed_density(x, sigma)?.exp())
    }

    /// Posterior-mean denoiser written into `out`. Identity at `σ = 0`.
    pub fn denoise_into(&self, x: &[f64], sigma: NoiseLevel, out: &mut [f64]) -> Result<()> {
        self.check_dim(x)?;
        if out.len() != self.dim {
            return Err(Error::input("output buffer has wrong length"));
        }
        if sigma.get() == 0.0 {
            out.copy_from_slice(x);
            return Ok(());
        }
        let s2 = sigma.get() * sigma.get();
        out.fill(0.0);
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for c in &self.components {
            let l = c.weight.ln() + c.log_density(x, s2);
            let r = accumulate(&mut max, &mut sum, l, |scale| {
                out.iter_mut().for_each(|o| *o *= scale)
            });
            if r == 0.0 {
                continue;
            }
            for ((o, (&xi, &mi)), &vi) in out.iter_mut().zip(x.iter().zip(&c.mean)).zip(&c.variance) {
                *o += r * (vi * xi + s2 * mi) / (vi + s2);
            }
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
        Ok(())
    }

    /// `E[y | y + n = x]` for `y ~ p_data`, `n ~ N(0, σ² I)`.
    pub fn ideal_denoise(&self, x: &[f64], sigma: NoiseLevel) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.denoise_into(x, sigma, &mut out)?;
        Ok(out)
    }

    /// `∇_x ln p(x; σ) = (D(x; σ) − x) / σ²`; undefined at `σ = 0`.
    pub fn score(&self, x: &[f64], sigma: NoiseLevel) -> Result<Vec<f64>> {
        if sigma.get() == 0.0 {
            return Err(Error::Domain("score is undefined at sigma = 0".into()));
        }
        let s2 = sigma.get() * sigma.get();
        let d = self.ideal_denoise(x, sigma)?;
        Ok(d.iter().zip(x).map(|(di, xi)| (di - xi) / s2).collect())
    }

    /// Index of the component with the largest posterior responsibility at `σ`.
    pub fn most_responsible(&self, x: &[f64], sigma: NoiseLevel) -> Result<usize> {
        self.check_dim(x)?;
        let s2 = sigma.get() * sigma.get();
        let mut best = (f64::NEG_INFINITY, None);
        for (k, c) in self.components.iter().enumerate() {
            let l = c.weight.ln() + c.log_density(x, s2);
            if best.1.is_none() || l > best.0 {
                best = (l, Some(k));
            }
        }
        if best.0 == f64::NEG_INFINITY {
            // Only point masses away from x: fall back to the nearest mean.
            return Ok(self.nearest_mean(x));
        }
        Ok(best.1.unwrap_or(0))
    }

    fn nearest_mean(&self, x: &[f64]) -> usize {
        let dist = |c: &Component| -> f64 { c.mean.iter().zip(x).map(|(m, v)| (m - v) * (m - v)).sum() };
        let mut best = 0;
        for (k, c) in self.components.iter().enumerate() {
            if dist(c) < dist(&self.components[best]) {
                best = k;
            }
        }
        best
    }

    /// `n` exact draws, deterministic in `seed` and independent of how the
    /// work is split: draw `i` always reads random stream `i`.
    pub fn sample_data(&self, n: usize, seed: u64) -> Result<SampleBatch> {
        self.sample_stream(n, seed, Domain::Data)
    }

    pub(crate) fn sample_stream(&self, n: usize, seed: u64, domain: Domain) -> Result<SampleBatch> {
        if n == 0 {
            return Err(Error::input("sample count must be >= 1"));
        }
        let picker = WeightedIndex::new(self.components.iter().map(|c| c.weight))
            .map_err(|e| Error::Internal(e.to_string()))?;
        let dim = self.dim;
        let mut data = vec![0.0; n * dim];
        data.par_chunks_mut(dim).enumerate().for_each(|(i, row)| {
            let mut rng = rng::stream(seed, domain, i as u64);
            let c = &self.components[picker.sample(&mut rng)];
            for (a, v) in row.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = c.mean[a] + c.variance[a].sqrt() * z;
            }
        });
        SampleBatch::new(dim, data, seed)
    }
}

/// Adds `exp(l)` to a running `exp(max) * sum` accumulator. When `l` raises
/// the maximum, `rescale` receives the factor that old partial sums must be
/// multiplied by. Returns the weight of the new term relative to the current
/// maximum.
#[inline]
fn accumulate(max: &mut f64, sum: &mut f64, l: f64, mut rescale: impl FnMut(f64)) -> f64 {
    if l == f64::NEG_INFINITY {
        return 0.0;
    }
    if l == f64::INFINITY {
        // Point mass hit exactly: it dominates everything else.
        if *max != f64::INFINITY {
            rescale(0.0);
            *sum = 0.0;
            *max = f64::INFINITY;
        }
        *sum += 1.0;
        return 1.0;
    }
    if *max == f64::INFINITY {
        return 0.0;
    }
    if l > *max {
        let scale = (*max - l).exp();
        *sum *= scale;
        rescale(scale);
        *max = l;
    }
    let r = (l - *max).exp();
    *sum += r;
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawClass {
    label: String,
    prior: f64,
    components: Vec<Component>,
}

#[derive(Deserialize)]
struct RawFamily {
    classes: Vec<RawClass>,
}

/// One class of a [`ConditionedFamily`].
#[derive(Debug, Clone, PartialEq)]
pub struct Class {
    pub label: String,
    pub prior: f64,
    pub mixture: GaussianMixture,
}

/// Class-conditional mixtures plus their implied unconditional mixture.
///
/// The unconditional mixture is the prior-weighted union of all class
/// components; it is what the unconditional denoiser sees.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(try_from = "RawFamily")]
pub struct ConditionedFamily {
    classes: Vec<Class>,
    unconditional: GaussianMixture,
}

impl TryFrom<RawFamily> for ConditionedFamily {
    type Error = Error;

    fn try_from(raw: RawFamily) -> Result<Self> {
        let classes = raw
            .classes
            .into_iter()
            .map(|c| {
                Ok(Class {
                    mixture: GaussianMixture::new(c.components)
                        .map_err(|e| Error::input(format!("class {:?}: {e}", c.label)))?,
                    label: c.label,
                    prior: c.prior,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ConditionedFamily::new(classes)
    }
}

impl Serialize for ConditionedFamily {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Out<'a> {
            classes: Vec<RawClassRef<'a>>,
        }
        #[derive(Serialize)]
        struct RawClassRef<'a> {
            label: &'a str,
            prior: f64,
            components: &'a [Component],
        }
        Out {
            classes: self
                .classes
                .iter()
                .map(|c| RawClassRef {
                    label: &c.label,
                    prior: c.prior,
                    components: c.mixture.components(),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl ConditionedFamily {
    pub fn new(classes: Vec<Class>) -> Result<Self> {
        let first = classes
            .first()
            .ok_or_else(|| Error::input("a family needs at least one class"))?;
        let dim = first.mixture.dim();
        let mut total = 0.0;
        for (i, c) in classes.iter().enumerate() {
            if c.mixture.dim() != dim {
                return Err(Error::input(format!("class {:?} has a different dimension", c.label)));
            }
            if !(c.prior.is_finite() && c.prior > 0.0) {
                return Err(Error::input(format!("class {:?}: prior must be > 0", c.label)));
            }
            if classes[..i].iter().any(|o| o.label == c.label) {
                return Err(Error::input(format!("duplicate class label {:?}", c.label)));
            }
            total += c.prior;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::input(format!("class priors sum to {total}, expected 1")));
        }
        let mut comps = Vec::new();
        for c in &classes {
            for k in c.mixture.components() {
                comps.push(Component::new(c.prior * k.weight, k.mean.clone(), k.variance.clone()));
            }
        }
        let unconditional = GaussianMixture::new(renormalized(comps))?;
        Ok(ConditionedFamily {
            classes,
            unconditional,
        })
    }

    pub fn dim(&self) -> usize {
        self.unconditional.dim()
    }

    pub fn classes(&self) -> &[Class] {
        &self.classes
    }

    pub fn class(&self, label: &str) -> Result<&GaussianMixture> {
        self.classes
            .iter()
            .find(|c| c.label == label)
            .map(|c| &c.mixture)
            .ok_or_else(|| Error::input(format!("unknown class {label:?}")))
    }

    pub fn unconditional(&self) -> &GaussianMixture {
        &self.unconditional
    }

    /// A family whose class mixtures leak a fraction `leak` of their mass to
    /// the other classes: `p'(x|c) = (1 − leak) p(x|c) + leak p(x|¬c)` where
    /// `p(x|¬c)` is the prior-weighted mixture of the remaining classes.
    ///
    /// This models a conditional denoiser that has not fully learned to use
    /// its conditioning; guidance can then help by pushing away from the
    /// unconditional prediction.
    pub fn with_leak(&self, leak: f64) -> Result<ConditionedFamily> {
        if !(0.0..1.0).contains(&leak) {
            return Err(Error::input(format!("leak must be in [0, 1), got {leak}")));
        }
        if leak == 0.0 {
            return Ok(self.clone());
        }
        if self.classes.len() < 2 {
            return Err(Error::input("leak needs at least two classes"));
        }
        let classes = self
            .classes
            .iter()
            .map(|c| {
                let rest: f64 = self.classes.iter().filter(|o| o.label != c.label).map(|o| o.prior).sum();
                let mut comps: Vec<Component> = c
                    .mixture
                    .components()
                    .iter()
                    .map(|k| Component::new((1.0 - leak) * k.weight, k.mean.clone(), k.variance.clone()))
                    .collect();
                for o in self.classes.iter().filter(|o| o.label != c.label) {
                    for k in o.mixture.components() {
                        comps.push(Component::new(
                            leak * o.prior / rest * k.weight,
                            k.mean.clone(),
                            k.variance.clone(),
                        ));
                    }
                }
                Ok(Class {
                    label: c.label.clone(),
                    prior: c.prior,
                    mixture: GaussianMixture::new(renormalized(comps))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ConditionedFamily::new(classes)
    }

    /// `w D(x|c; σ) + (1 − w) D(x; σ)`.
    pub fn guided_denoise(&self, class: &str, x: &[f64], sigma: NoiseLevel, w: f64) -> Result<Vec<f64>> {
        let cond = self.class(class)?.ideal_denoise(x, sigma)?;
        let uncond = self.unconditional.ideal_denoise(x, sigma)?;
        Ok(cond.iter().zip(&uncond).map(|(c, u)| w * c + (1.0 - w) * u).collect())
    }
}

/// Absorbs round-off so that weights built from products of probabilities
/// still pass the sum-to-one check.
fn renormalized(mut comps: Vec<Component>) -> Vec<Component> {
    let total: f64 = comps.iter().map(|c| c.weight).sum();
    for c in &mut comps {
        c.weight /= total;
    }
    comps
}
