//! Synthetic and CSV datasets, plus the per-epoch rank partition.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::model::Batch;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetKind {
    GaussBlobs {
        n: usize,
        dim: usize,
        classes: usize,
        /// Standard deviation of each blob relative to the spread of centers.
        spread: f64,
    },
    TwoSpirals {
        n: usize,
        noise: f64,
    },
    DigitsCsv(PathBuf),
}

impl DatasetKind {
    /// Parses `gauss_blobs`, `two_spirals` or `digits_csv:<path>` with
    /// default sizes.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gauss_blobs" => Ok(DatasetKind::GaussBlobs {
                n: 5000,
                dim: 16,
                classes: 10,
                spread: 1.0,
            }),
            "two_spirals" => Ok(DatasetKind::TwoSpirals { n: 2000, noise: 0.02 }),
            _ => match s.strip_prefix("digits_csv:") {
                Some(path) if !path.is_empty() => Ok(DatasetKind::DigitsCsv(PathBuf::from(path))),
                _ => Err(Error::Config(format!(
                    "unknown dataset '{s}' (expected gauss_blobs, two_spirals or digits_csv:<path>)"
                ))),
            },
        }
    }
}

/// Builds a dataset; synthetic kinds are a pure function of `seed`.
pub fn make_dataset(kind: &DatasetKind, seed: u64) -> Result<Dataset> {
    match kind {
        DatasetKind::GaussBlobs { n, dim, classes, spread } => Ok(gauss_blobs(*n, *dim, *classes, *spread, seed)),
        DatasetKind::TwoSpirals { n, noise } => Ok(two_spirals(*n, *noise, seed)),
        DatasetKind::DigitsCsv(path) => digits_csv(path),
    }
}

/// Isotropic Gaussian clusters around unit-variance random centers.
pub fn gauss_blobs(n: usize, dim: usize, classes: usize, spread: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes.max(1);
        inputs.extend(centers[c].iter().map(|m| m + spread * rng.sample::<f64, _>(StandardNormal)));
        labels.push(c);
    }
    Dataset {
        inputs,
        dim,
        labels,
        classes,
    }
}

/// Two interleaved spirals of 1.5 turns each in the unit disc.
pub fn two_spirals(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.gen::<f64>().sqrt() * 3.0 * PI;
        let r = t / (3.0 * PI);
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        inputs.push(sign * r * t.cos() + noise * rng.sample::<f64, _>(StandardNormal));
        inputs.push(sign * r * t.sin() + noise * rng.sample::<f64, _>(StandardNormal));
        labels.push(i % 2);
    }
    Dataset {
        inputs,
        dim: 2,
        labels,
        classes: 2,
    }
}

/// Reads `label,f1,f2,...` rows without a header.
pub fn digits_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Config(format!("{}:{}: {what}", path.display(), lineno + 1));
        let mut fields = line.split(',').map(str::trim);
        let label: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad("label is not a non-negative integer"))?;
        let row: Vec<f64> = fields
            .map(|f| f.parse::<f64>().map_err(|_| bad(&format!("bad feature '{f}'"))))
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => return Err(bad(&format!("expected {d} features, found {}", row.len()))),
            _ => {}
        }
        labels.push(label);
        inputs.extend(row);
    }
    let dim = dim.ok_or_else(|| Error::Config(format!("{} has no rows", path.display())))?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        inputs,
        dim,
        labels,
        classes,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
        }
        Batch::new(inputs, self.dim, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn all(&self) -> Result<Batch> {
        Batch::new(self.inputs.clone(), self.dim, self.labels.clone())
    }

    /// Appends a constant 1 feature.
    pub fn with_bias(&self) -> Dataset {
        let mut inputs = Vec::with_capacity(self.len() * (self.dim + 1));
        for i in 0..self.len() {
            inputs.extend_from_slice(self.row(i));
            inputs.push(1.0);
        }
        Dataset {
            inputs,
            dim: self.dim + 1,
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }

    /// Zero-mean, unit-variance features (constant features are centered only).
    pub fn standardized(&self) -> Dataset {
        let n = self.len().max(1) as f64;
        let mut out = self.clone();
        for k in 0..self.dim {
            let mean = (0..self.len()).map(|i| self.inputs[i * self.dim + k]).sum::<f64>() / n;
            let var = (0..self.len()).map(|i| (self.inputs[i * self.dim + k] - mean).powi(2)).sum::<f64>() / n;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for i in 0..self.len() {
                out.inputs[i * self.dim + k] = (self.inputs[i * self.dim + k] - mean) / sd;
            }
        }
        out
    }

    /// Keeps only labels 0 and 1 (for the binary logistic model).
    pub fn binary(&self) -> Dataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] < 2).collect();
        Dataset {
            classes: 2,
            ..self.subset(&keep)
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
        }
        Dataset {
            inputs,
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Deterministic shuffle-and-split into (train, eval).
    pub fn split(&self, eval_frac: f64, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_eval = ((self.len() as f64) * eval_frac).round() as usize;
        let (eval, train) = order.split_at(n_eval.min(self.len()));
        (self.subset(train), self.subset(eval))
    }
}

/// Indices owned by `rank` in `epoch`: the whole index range is shuffled
/// with a seed shared by all ranks, then cut into contiguous shards whose
/// sizes differ by at most one.
pub fn partition(n: usize, world: usize, rank: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch)));
    let base = n / world;
    let extra = n % world;
    let start = rank * base + rank.min(extra);
    let len = base + usize::from(rank < extra);
    order[start..start + len].to_vec()
}
