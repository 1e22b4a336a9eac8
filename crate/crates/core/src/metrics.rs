//! Distribution-quality metrics computed directly in data space.
//!
//! At the dimensions used here (d ≤ 3) the data space is a perfectly good
//! feature space, so the Fréchet distance is taken between Gaussian fits of
//! the raw samples, and k-NN precision/recall uses raw Euclidean distances.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::SampleBatch;
use crate::error::{Error, Result};
use crate::mixture::{GaussianMixture, NoiseLevel};

/// Version of the serialized [`MetricsReport`] document.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Default neighbourhood size for precision/recall.
pub const DEFAULT_K: usize = 3;

/// Default histogram resolution per axis.
pub const DEFAULT_BINS: usize = 64;

const KL_SMOOTHING: f64 = 1e-9;

/// Sample mean and unbiased covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn of(batch: &SampleBatch) -> Self {
        let d = batch.dim();
        let n = batch.len() as f64;
        let mut mean = DVector::zeros(d);
        for r in batch.rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for r in batch.rows() {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in i..d {
                    cov[(i, j)] += di * (r[j] - mean[j]);
                }
            }
        }
        let denom = (n - 1.0).max(1.0);
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] /= denom;
                cov[(j, i)] = cov[(i, j)];
            }
        }
        GaussianStats { mean, cov }
    }
}

/// Fréchet distance plus whether negative eigenvalues had to be clipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frechet {
    pub distance: f64,
    pub clipped: bool,
}

/// Square root of a symmetric PSD matrix via eigendecomposition; negative
/// eigenvalues from round-off are clipped to zero and reported.
fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut clipped = false;
    let roots = eig.eigenvalues.map(|l| {
        if l < 0.0 {
            clipped |= l < -1e-12 * eig.eigenvalues.amax().max(1e-300);
            0.0
        } else {
            l.sqrt()
        }
    });
    let v = &eig.eigenvectors;
    (v * DMatrix::from_diagonal(&roots) * v.transpose(), clipped)
}

/// `|μ_a − μ_b|² + tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^{1/2})`.
///
/// The trace of `(Σ_a Σ_b)^{1/2}` equals that of `(Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2}`,
/// which is symmetric and therefore safe to decompose.
pub fn frechet_from_stats(a: &GaussianStats, b: &GaussianStats) -> Result<Frechet> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::input("statistics have different dimensions"));
    }
    let (sa, c1) = psd_sqrt(&a.cov);
    let inner = &sa * &b.cov * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let scale = eig.eigenvalues.amax().max(1e-300);
    let mut c2 = false;
    let tr_sqrt: f64 = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l < 0.0 {
                c2 |= l < -1e-12 * scale;
                0.0
            } else {
                l.sqrt()
            }
        })
        .sum();
    let dm = &a.mean - &b.mean;
    let d = dm.dot(&dm) + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(Frechet {
        distance: d.max(0.0),
        clipped: c1 || c2,
    })
}

/// Fréchet distance between Gaussian fits of two batches.
pub fn frechet_distance(a: &SampleBatch, b: &SampleBatch) -> Result<Frechet> {
    if a.dim() != b.dim() {
        return Err(Error::input(format!("batch dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let need = a.dim() + 2;
    if a.len() < need || b.len() < need {
        return Err(Error::input(format!("Fréchet distance needs at least {need} samples per batch")));
    }
    frechet_from_stats(&GaussianStats::of(a), &GaussianStats::of(b))
}

/// Mean absolute difference of sorted samples; both batches 1-D and equally sized.
pub fn wasserstein1_1d(a: &SampleBatch, b: &SampleBatch) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::input("Wasserstein-1 is only implemented for 1-D batches"));
    }
    if a.len() != b.len() {
        return Err(Error::input(format!("batch sizes differ: {} vs {}", a.len(), b.len())));
    }
    let mut x = a.as_slice().to_vec();
    let mut y = b.as_slice().to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    Ok(x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Union of balls centred on each point with radius equal to the distance to
/// its k-th nearest other point.
#[derive(Debug, Clone)]
pub struct KnnManifold {
    dim: usize,
    // Points sorted by their first coordinate, radius² alongside.
    points: Vec<f64>,
    radii2: Vec<f64>,
    max_radius: f64,
}

impl KnnManifold {
    pub fn new(batch: &SampleBatch, k: usize) -> Result<Self> {
        if k == 0 || k >= batch.len() {
            return Err(Error::input(format!(
                "k must satisfy 1 <= k < n, got k = {k}, n = {}",
                batch.len()
            )));
        }
        let dim = batch.dim();
        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.sort_by(|&i, &j| batch.row(i)[0].total_cmp(&batch.row(j)[0]).then(i.cmp(&j)));
        let points: Vec<f64> = order.iter().flat_map(|&i| batch.row(i).iter().copied()).collect();
        let n = order.len();
        let pt = |i: usize| &points[i * dim..(i + 1) * dim];
        let radii2: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                // k smallest squared distances, kept sorted.
                let mut best: Vec<f64> = Vec::with_capacity(k + 1);
                let x0 = pt(i)[0];
                let (mut left, mut right) = (i, i + 1);
                loop {
                    let bound = if best.len() == k { best[k - 1] } else { f64::INFINITY };
                    let lgap = if left > 0 { x0 - pt(left - 1)[0] } else { f64::INFINITY };
                    let rgap = if right < n { pt(right)[0] - x0 } else { f64::INFINITY };
                    let (gap, go_left) = if lgap <= rgap { (lgap, true) } else { (rgap, false) };
                    if gap == f64::INFINITY || gap * gap > bound {
                        break;
                    }
                    let j = if go_left {
                        left -= 1;
                        left
                    } else {
                        right += 1;
                        right - 1
                    };
                    let d = dist2(pt(i), pt(j));
                    if best.len() < k || d < best[k - 1] {
                        let pos = best.partition_point(|&b| b <= d);
                        best.insert(pos, d);
                        best.truncate(k);
                    }
                }
                best[k - 1]
            })
            .collect();
        let max_radius = radii2.iter().copied().fold(0.0, f64::max).sqrt();
        Ok(KnnManifold {
            dim,
            points,
            radii2,
            max_radius,
        })
    }

    /// Whether `x` lies in any ball (boundary included).
    pub fn contains(&self, x: &[f64]) -> bool {
        let d = self.dim;
        let n = self.radii2.len();
        let lo = self.points_first().partition_point(|&v| v < x[0] - self.max_radius);
        for i in lo..n {
            let p = &self.points[i * d..(i + 1) * d];
            if p[0] > x[0] + self.max_radius {
                break;
            }
            if dist2(p, x) <= self.radii2[i] {
                return true;
            }
        }
        false
    }

    fn points_first(&self) -> FirstCoords<'_> {
        FirstCoords(self)
    }

    /// Fraction of `batch` inside the manifold.
    pub fn coverage(&self, batch: &SampleBatch) -> f64 {
        let hits: usize = (0..batch.len())
            .into_par_iter()
            .filter(|&i| self.contains(batch.row(i)))
            .count();
        hits as f64 / batch.len() as f64
    }
}

/// Random access to the first coordinate of the sorted points.
struct FirstCoords<'a>(&'a KnnManifold);

impl FirstCoords<'_> {
    fn partition_point(&self, pred: impl Fn(&f64) -> bool) -> usize {
        let m = self.0;
        let (mut lo, mut hi) = (0, m.radii2.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            if pred(&m.points[mid * m.dim]) {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// `(precision, recall)`: the share of generated points inside the real
/// manifold and the share of real points inside the generated manifold.
pub fn knn_precision_recall(real: &SampleBatch, gen: &SampleBatch, k: usize) -> Result<(f64, f64)> {
    if real.dim() != gen.dim() {
        return Err(Error::input("batch dimensions differ"));
    }
    let real_m = KnnManifold::new(real, k)?;
    let gen_m = KnnManifold::new(gen, k)?;
    Ok((real_m.coverage(gen), gen_m.coverage(real)))
}

/// Fraction of samples assigned to each component (by largest responsibility at σ = 0).
pub fn mode_masses(batch: &SampleBatch, mix: &GaussianMixture) -> Result<Vec<f64>> {
    if batch.dim() != mix.dim() {
        return Err(Error::input("batch and mixture dimensions differ"));
    }
    let assigned: Vec<usize> = (0..batch.len())
        .into_par_iter()
        .map(|i| mix.most_responsible(batch.row(i), NoiseLevel::ZERO))
        .collect::<Result<_>>()?;
    let mut counts = vec![0usize; mix.components().len()];
    for k in assigned {
        counts[k] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / batch.len() as f64).collect())
}

/// Histogram over a shared range: `bins` per axis, 1-D or 2-D.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins: usize,
    pub counts: Vec<usize>,
    pub total: usize,
}

impl Histogram {
    pub fn build(batch: &SampleBatch, lo: &[f64], hi: &[f64], bins: usize) -> Histogram {
        let d = batch.dim();
        let mut counts = vec![0usize; bins.pow(d as u32)];
        for r in batch.rows() {
            let mut idx = 0;
            for a in 0..d {
                let t = (r[a] - lo[a]) / (hi[a] - lo[a]);
                let b = ((t * bins as f64).floor().max(0.0) as usize).min(bins - 1);
                idx = idx * bins + b;
            }
            counts[idx] += 1;
        }
        Histogram {
            lo: lo.to_vec(),
            hi: hi.to_vec(),
            bins,
            counts,
            total: batch.len(),
        }
    }

    /// Smoothed bin probabilities.
    fn probabilities(&self, eps: f64) -> Vec<f64> {
        let norm = 1.0 + eps * self.counts.len() as f64;
        self.counts
            .iter()
            .map(|&c| (c as f64 / self.total as f64 + eps) / norm)
            .collect()
    }
}

fn shared_range(a: &SampleBatch, b: &SampleBatch) -> (Vec<f64>, Vec<f64>) {
    let d = a.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for r in a.rows().chain(b.rows()) {
        for i in 0..d {
            lo[i] = lo[i].min(r[i]);
            hi[i] = hi[i].max(r[i]);
        }
    }
    for i in 0..d {
        if hi[i] <= lo[i] {
            lo[i] -= 0.5;
            hi[i] += 0.5;
        }
    }
    (lo, hi)
}

/// `KL(a ‖ b)` between smoothed histograms on a shared range.
pub fn kl_histogram(a: &SampleBatch, b: &SampleBatch, bins: usize) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::input("batch dimensions differ"));
    }
    if a.dim() > 2 {
        return Err(Error::input("histogram KL supports 1-D and 2-D batches only"));
    }
    if bins < 10 {
        return Err(Error::input(format!("need at least 10 bins, got {bins}")));
    }
    let (lo, hi) = shared_range(a, b);
    let p = Histogram::build(a, &lo, &hi, bins).probabilities(KL_SMOOTHING);
    let q = Histogram::build(b, &lo, &hi, bins).probabilities(KL_SMOOTHING);
    let kl: f64 = p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum();
    Ok(kl.max(0.0))
}

/// What [`MetricsReport::compute`] should evaluate.
#[derive(Debug, Clone, Copy)]
pub struct MetricOptions<'a> {
    /// Neighbourhood size for precision/recall; `None` skips them.
    pub k: Option<usize>,
    pub bins: usize,
    /// Mixture for mode masses; `None` skips them.
    pub mixture: Option<&'a GaussianMixture>,
}

impl Default for MetricOptions<'_> {
    fn default() -> Self {
        MetricOptions {
            k: Some(DEFAULT_K),
            bins: DEFAULT_BINS,
            mixture: None,
        }
    }
}

/// All applicable metrics of a generated batch against a reference batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub dim: usize,
    pub n_real: usize,
    pub n_gen: usize,
    pub frechet: f64,
    pub frechet_clipped: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wasserstein1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mode_masses: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kl_hist: Option<f64>,
    pub bins: usize,
}

impl MetricsReport {
    pub fn compute(real: &SampleBatch, gen: &SampleBatch, opts: MetricOptions<'_>) -> Result<Self> {
        if real.dim() != gen.dim() {
            return Err(Error::input(format!(
                "batch dimensions differ: {} vs {}",
                real.dim(),
                gen.dim()
            )));
        }
        let f = frechet_distance(real, gen)?;
        let wasserstein1 = if real.dim() == 1 && real.len() == gen.len() {
            Some(wasserstein1_1d(real, gen)?)
        } else {
            None
        };
        let (precision, recall) = match opts.k {
            Some(k) => {
                let (p, r) = knn_precision_recall(real, gen, k)?;
                (Some(p), Some(r))
            }
            None => (None, None),
        };
        let mode_masses = opts.mixture.map(|m| mode_masses(gen, m)).transpose()?;
        let kl_hist = if real.dim() <= 2 {
            Some(kl_histogram(real, gen, opts.bins)?)
        } else {
            None
        };
        Ok(MetricsReport {
            schema_version: METRICS_SCHEMA_VERSION,
            dim: real.dim(),
            n_real: real.len(),
            n_gen: gen.len(),
            frechet: f.distance,
            frechet_clipped: f.clipped,
            wasserstein1,
            k: opts.k,
            precision,
            recall,
            mode_masses,
            kl_hist,
            bins: opts.bins,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
