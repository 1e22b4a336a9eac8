use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::Provenance;

/// `n × d` matrix of points, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    dim: usize,
    data: Vec<f64>,
    seed: u64,
    provenance: Option<Provenance>,
}

impl SampleBatch {
    pub fn new(dim: usize, data: Vec<f64>, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("batch dimension must be >= 1"));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::input(format!(
                "batch data of length {} is not a non-empty multiple of dimension {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("batch contains non-finite values"));
        }
        Ok(SampleBatch {
            dim,
            data,
            seed,
            provenance: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], seed: u64) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::input("rows have different lengths"));
        }
        SampleBatch::new(dim, rows.concat(), seed)
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Values of one coordinate across the batch.
    pub fn axis(&self, a: usize) -> Vec<f64> {
        self.rows().map(|r| r[a]).collect()
    }

    /// Rows of `self` followed by rows of `other`. Keeps `self`'s seed and provenance.
    pub fn concat(&self, other: &SampleBatch) -> Result<SampleBatch> {
        if self.dim != other.dim {
            return Err(Error::input("cannot concatenate batches of different dimension"));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(SampleBatch {
            dim: self.dim,
            data,
            seed: self.seed,
            provenance: self.provenance.clone(),
        })
    }

    #[cfg(test)]
    pub(crate) fn map_values(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<SampleBatch> {
        let rows: Vec<Vec<f64>> = self.rows().map(f).collect();
        SampleBatch::from_rows(&rows, self.seed)
    }
}
