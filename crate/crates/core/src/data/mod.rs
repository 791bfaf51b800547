//! Synthetic domain-incremental task streams.
//!
//! A base problem of isotropic Gaussian class blobs is generated once. Each
//! task applies a [`DomainSpec`] to every base sample, so all tasks share the
//! label space while the feature distribution shifts. Task data is then split
//! across clients with class-wise Dirichlet proportions.

mod domain;
pub mod format;
mod partition;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub use domain::{DomainSpec, Transform};
pub use partition::{build_task_stream, dirichlet_partition, ClientShard, HeterogeneityConfig, StreamMode};

/// A labelled feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

/// One domain-incremental task: train and test samples under one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub domain: DomainSpec,
    pub num_classes: usize,
    pub input_dim: usize,
    /// Construction seed; also keys the task-scoped noise stream.
    pub seed: u64,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskDataset {
    pub fn num_train(&self) -> usize {
        self.train.len()
    }

    pub fn class_counts(samples: &[Sample], num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for s in samples {
            counts[s.y] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        for s in self.train.iter().chain(&self.test) {
            if s.y >= self.num_classes {
                return Err(Error::Data(format!(
                    "task {}: label {} outside [0, {})",
                    self.task_id, s.y, self.num_classes
                )));
            }
            if s.x.len() != self.input_dim || s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "task {}: malformed feature vector",
                    self.task_id
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the Gaussian-blob base problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    /// Radius of the sphere carrying the class means.
    pub class_separation: f64,
    /// Per-coordinate standard deviation of each blob.
    pub sigma: f64,
}

impl Default for BaseSpec {
    fn default() -> Self {
        BaseSpec {
            num_classes: 5,
            input_dim: 16,
            samples_per_class: 250,
            class_separation: 4.0,
            sigma: 1.0,
        }
    }
}

/// Fraction of each class assigned to the train split.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Generates the identity-domain base dataset.
///
/// Class means are Gaussian directions rescaled to norm `class_separation`.
/// Each class is split 80/20 into train and test before shuffling, so both
/// splits are class-balanced and disjoint.
pub fn make_base_dataset(spec: &BaseSpec, seed: u64) -> Result<TaskDataset> {
    if spec.num_classes < 2 {
        return Err(Error::input("need at least two classes"));
    }
    if spec.input_dim < 2 {
        return Err(Error::input("input_dim must be at least 2"));
    }
    if spec.samples_per_class == 0 {
        return Err(Error::input("samples_per_class must be positive"));
    }
    if !(spec.sigma >= 0.0 && spec.class_separation >= 0.0) {
        return Err(Error::input("sigma and class_separation must be non-negative"));
    }

    let mut rng = stream_rng(seed, Stream::BaseData, &[]);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let dir: Vec<f64> = (0..spec.input_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            dir.iter().map(|v| v / norm * spec.class_separation).collect()
        })
        .collect();

    let n_train = ((spec.samples_per_class as f64) * TRAIN_FRACTION).round() as usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (y, mean) in means.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            let x: Vec<f64> = mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spec.sigma * z
                })
                .collect();
            let sample = Sample { x, y };
            if i < n_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);

    Ok(TaskDataset {
        task_id: 0,
        domain: DomainSpec::identity(),
        num_classes: spec.num_classes,
        input_dim: spec.input_dim,
        seed,
        train,
        test,
    })
}

/// Transforms every feature vector of `base`; labels are untouched.
///
/// Noise (if any) is drawn from a stream keyed by `(base.seed, task_id)`,
/// train samples first, then test samples.
pub fn apply_domain(base: &TaskDataset, domain: &DomainSpec, task_id: usize) -> Result<TaskDataset> {
    domain.validate(base.input_dim)?;
    let mut rng = stream_rng(base.seed, Stream::Domain, &[task_id as u64]);
    let mut map = |samples: &[Sample]| -> Result<Vec<Sample>> {
        samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    x: domain.apply(&s.x, &mut rng)?,
                    y: s.y,
                })
            })
            .collect()
    };
    let train = map(&base.train)?;
    let test = map(&base.test)?;
    Ok(TaskDataset {
        task_id,
        domain: domain.clone(),
        num_classes: base.num_classes,
        input_dim: base.input_dim,
        seed: base.seed,
        train,
        test,
    })
}

/// Base problem plus the ordered list of domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub base: BaseSpec,
    pub domains: Vec<DomainSpec>,
}

impl Default for DataConfig {
    /// Five classes in 16 dimensions; four domains rotated by 0°, 60°, 120°
    /// and 180° with per-domain noise σ = 0.3.
    fn default() -> Self {
        DataConfig {
            base: BaseSpec::default(),
            domains: [0.0, 60.0, 120.0, 180.0]
                .iter()
                .map(|&deg| DomainSpec::rotation_degrees(deg, 0.3))
                .collect(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::config("data.domains", "at least one domain is required"));
        }
        for (i, d) in self.domains.iter().enumerate() {
            d.validate(self.base.input_dim)
                .map_err(|e| Error::config(format!("data.domains[{i}]"), e.to_string()))?;
        }
        Ok(())
    }

    /// One dataset per domain; task ids follow the domain order.
    pub fn build_tasks(&self, seed: u64) -> Result<Vec<TaskDataset>> {
        self.validate()?;
        let base = make_base_dataset(&self.base, seed)?;
        self.domains
            .iter()
            .enumerate()
            .map(|(t, d)| apply_domain(&base, d, t))
            .collect()
    }
}
