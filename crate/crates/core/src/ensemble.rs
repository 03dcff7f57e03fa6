//! Particle ensembles and their CSV/JSON persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// `count × dim` particle positions stored row-major, plus the level of the
/// last target applied and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    data: Vec<f64>,
    count: usize,
    dim: usize,
    pub level_index: usize,
    pub iteration: u64,
}

/// Sidecar written next to an ensemble CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub count: usize,
    pub dim: usize,
    pub level_index: usize,
    pub iteration: u64,
    pub seed: Option<u64>,
}

impl ParticleEnsemble {
    pub fn from_flat(data: Vec<f64>, count: usize, dim: usize) -> Result<Self> {
        if count == 0 || dim == 0 {
            return Err(Error::Argument("ensemble needs at least one particle and one dimension".into()));
        }
        if data.len() != count * dim {
            return Err(Error::DimensionMismatch {
                expected: count * dim,
                got: data.len(),
            });
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "non-finite coordinate in particle {}",
                k / dim
            )));
        }
        Ok(Self {
            data,
            count,
            dim,
            level_index: 0,
            iteration: 0,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_flat(data, rows.len(), dim)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn particles(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Same metadata, new positions. The shape is fixed for the lifetime of a run.
    pub(crate) fn with_positions(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            data,
            count: self.count,
            dim: self.dim,
            level_index: self.level_index,
            iteration: self.iteration,
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in self.particles() {
            for (mk, pk) in m.iter_mut().zip(p) {
                *mk += pk;
            }
        }
        let n = self.count as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Sample covariance (normalized by `N - 1`, or zero for a single particle), row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mean = self.mean();
        let mut c = vec![0.0; d * d];
        for p in self.particles() {
            for a in 0..d {
                let da = p[a] - mean[a];
                for b in 0..d {
                    c[a * d + b] += da * (p[b] - mean[b]);
                }
            }
        }
        if self.count > 1 {
            let n = (self.count - 1) as f64;
            c.iter_mut().for_each(|v| *v /= n);
        }
        c
    }

    pub fn meta(&self, seed: Option<u64>) -> EnsembleMeta {
        EnsembleMeta {
            count: self.count,
            dim: self.dim,
            level_index: self.level_index,
            iteration: self.iteration,
            seed,
        }
    }

    /// Writes `theta_1,...,theta_d` rows to `csv_path` and the metadata sidecar
    /// to the same path with a `.json` extension.
    pub fn save(&self, csv_path: &Path, seed: Option<u64>) -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(csv_path)?));
        let header: Vec<String> = (1..=self.dim).map(|k| format!("theta_{k}")).collect();
        w.write_record(&header)?;
        for p in self.particles() {
            w.write_record(p.iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        let meta = File::create(csv_path.with_extension("json"))?;
        serde_json::to_writer_pretty(BufWriter::new(meta), &self.meta(seed))?;
        Ok(())
    }

    pub fn load(csv_path: &Path) -> Result<(Self, EnsembleMeta)> {
        let meta: EnsembleMeta =
            serde_json::from_reader(BufReader::new(File::open(csv_path.with_extension("json"))?))?;
        let mut r = csv::Reader::from_reader(BufReader::new(File::open(csv_path)?));
        let headers = r.headers()?.clone();
        if headers.len() != meta.dim
            || headers.iter().enumerate().any(|(k, h)| h != format!("theta_{}", k + 1))
        {
            return Err(Error::Argument(format!("unexpected ensemble header {headers:?}")));
        }
        let mut data = Vec::with_capacity(meta.count * meta.dim);
        for rec in r.records() {
            for field in rec?.iter() {
                data.push(field.trim().parse::<f64>().map_err(|e| {
                    Error::Argument(format!("bad ensemble value {field:?}: {e}"))
                })?);
            }
        }
        let mut ens = Self::from_flat(data, meta.count, meta.dim)?;
        ens.level_index = meta.level_index;
        ens.iteration = meta.iteration;
        Ok((ens, meta))
    }
}

/// `count` i.i.d. draws from `N(mean, diag(diag_cov))`.
pub fn init_ensemble(count: usize, mean: &[f64], diag_cov: &[f64], seed: u64) -> Result<ParticleEnsemble> {
    if mean.len() != diag_cov.len() {
        return Err(Error::DimensionMismatch {
            expected: mean.len(),
            got: diag_cov.len(),
        });
    }
    if let Some(v) = diag_cov.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Argument(format!("initial variances must be positive, got {v}")));
    }
    let std: Vec<f64> = diag_cov.iter().map(|v| v.sqrt()).collect();
    let mut rng = rng::seeded(seed);
    let mut data = Vec::with_capacity(count * mean.len());
    for _ in 0..count {
        for (m, s) in mean.iter().zip(&std) {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(m + s * z);
        }
    }
    ParticleEnsemble::from_flat(data, count, mean.len())
}
