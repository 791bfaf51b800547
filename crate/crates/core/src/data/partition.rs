use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{Sample, TaskDataset};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityConfig {
    /// Dirichlet concentration; smaller is more skewed.
    pub alpha: f64,
    pub num_clients: usize,
    pub seed: u64,
}

/// The part of one task's train split held by one client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub task_id: usize,
    /// Indices into the task's train split, ascending.
    pub indices: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn samples<'a>(&'a self, task: &'a TaskDataset) -> impl Iterator<Item = &'a Sample> + 'a {
        self.indices.iter().map(move |&i| &task.train[i])
    }
}

/// Draws one point from `Dir(alpha · 1_k)` via normalized Gamma variates.
fn dirichlet<R: rand::Rng>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = p.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        p.iter_mut().for_each(|v| *v /= sum);
    } else {
        // Every variate underflowed; only reachable for tiny alpha.
        p.iter_mut().for_each(|v| *v = 1.0 / k as f64);
    }
    p
}

/// Integer counts summing to `n` from proportions `p`: floors first, then the
/// leftover units go to the largest fractional parts (lower index on ties).
pub(crate) fn largest_remainder(p: &[f64], n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = p.iter().map(|v| v * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut left = n.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Splits a task's train set across clients with class-wise Dirichlet skew.
///
/// For each class the sample indices are shuffled, proportions are drawn from
/// `Dir(α·1_K)`, and consecutive runs of the shuffled indices are handed out
/// by largest-remainder counts. The result is an exact partition.
pub fn dirichlet_partition(task: &TaskDataset, cfg: &HeterogeneityConfig) -> Result<Vec<ClientShard>> {
    if cfg.num_clients == 0 {
        return Err(Error::input("partition needs at least one client"));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha.is_finite()) {
        return Err(Error::input(format!("dirichlet alpha must be positive, got {}", cfg.alpha)));
    }
    let k = cfg.num_clients;
    let mut rng = stream_rng(cfg.seed, Stream::Partition, &[task.task_id as u64]);
    let mut shards: Vec<ClientShard> = (0..k)
        .map(|client_id| ClientShard {
            client_id,
            task_id: task.task_id,
            indices: Vec::new(),
        })
        .collect();

    for class in 0..task.num_classes {
        let mut idx: Vec<usize> = task
            .train
            .iter()
            .enumerate()
            .filter(|(_, s)| s.y == class)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(&mut rng);
        let p = dirichlet(cfg.alpha, k, &mut rng);
        let counts = largest_remainder(&p, idx.len());
        let mut start = 0;
        for (shard, &c) in shards.iter_mut().zip(&counts) {
            shard.indices.extend_from_slice(&idx[start..start + c]);
            start += c;
        }
    }
    for shard in &mut shards {
        shard.indices.sort_unstable();
    }
    Ok(shards)
}

/// How domains are ordered for each client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    /// Every client sees the domains in the configured order.
    #[default]
    Synchronized,
    /// Each client gets an independent permutation of the domains.
    Shuffled,
}

/// Per-client ordered lists of domain indices; each domain appears exactly
/// once per client.
pub fn build_task_stream(num_domains: usize, num_clients: usize, mode: StreamMode, seed: u64) -> Result<Vec<Vec<usize>>> {
    if num_domains == 0 {
        return Err(Error::input("task stream needs at least one domain"));
    }
    let ordered: Vec<usize> = (0..num_domains).collect();
    Ok((0..num_clients)
        .map(|k| match mode {
            StreamMode::Synchronized => ordered.clone(),
            StreamMode::Shuffled => {
                let mut rng = stream_rng(seed, Stream::TaskOrder, &[k as u64]);
                let mut order = ordered.clone();
                order.shuffle(&mut rng);
                order
            }
        })
        .collect())
}
