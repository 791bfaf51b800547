//! Per-client lifecycle: task arrival, strategy execution, snapshots, and
//! local training with knowledge migration.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::matching::{
    balanced_batch, matching_intensity, select_strategy, Decision, MatchingReport, NegativeSampler,
    NegativeSynthesisSpec,
};
use crate::nn::{ArchSpec, GradientSet, LossSpec, PersonalModel};
use crate::rng::{derive_seed, stream_rng, Stream};

/// `Σ_i ρ_i · ‖w − w_i‖²` over flat parameter vectors.
pub fn migration_loss(w: &[f64], snapshots: &[Vec<f64>], rho: &[f64]) -> Result<f64> {
    check_migration_shapes(w, snapshots, rho)?;
    Ok(snapshots
        .iter()
        .zip(rho)
        .map(|(s, r)| r * w.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum())
}

/// `Σ_i 2·ρ_i·(w − w_i)`.
pub fn migration_grad(w: &[f64], snapshots: &[Vec<f64>], rho: &[f64]) -> Result<Vec<f64>> {
    check_migration_shapes(w, snapshots, rho)?;
    let mut g = vec![0.0; w.len()];
    for (s, r) in snapshots.iter().zip(rho) {
        for ((gi, wi), si) in g.iter_mut().zip(w).zip(s) {
            *gi += 2.0 * r * (wi - si);
        }
    }
    Ok(g)
}

fn check_migration_shapes(w: &[f64], snapshots: &[Vec<f64>], rho: &[f64]) -> Result<()> {
    if snapshots.len() != rho.len() {
        return Err(Error::input(format!(
            "{} snapshots but {} intensities",
            snapshots.len(),
            rho.len()
        )));
    }
    if snapshots.iter().any(|s| s.len() != w.len()) {
        return Err(Error::input("snapshot size differs from the live model"));
    }
    Ok(())
}

/// How a client picks the model for a newly arrived task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskPolicy {
    /// Knowledge matching with threshold `lambda`, plus migration toward
    /// the other pooled models.
    Matching {
        lambda: f64,
        max_pool_size: usize,
        include_self: bool,
    },
    /// One model for the whole stream.
    SingleModel,
    /// A fresh model for every task.
    AlwaysNew,
    /// One trunk for the whole stream with a fresh classification head per task.
    SharedTrunk,
}

/// Local optimisation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub negatives: NegativeSynthesisSpec,
}

/// One client's model pool and task bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub pool: Vec<PersonalModel>,
    /// Frozen copies of the pooled models taken at task start, excluding the
    /// model bound to the current task (unless self-anchoring is enabled).
    pub snapshots: Vec<Vec<f64>>,
    /// Intensities matching `snapshots` one to one.
    pub current_rho: Vec<f64>,
    /// Task position → pool index.
    pub bindings: BTreeMap<usize, usize>,
    pub current_task: Option<usize>,
    /// False while the client has no data for the current task.
    pub active: bool,
    pub reports: BTreeMap<usize, MatchingReport>,
}

/// The payload a client pushes to the server after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub client_id: usize,
    pub task_id: usize,
    pub model: PersonalModel,
    pub num_samples: usize,
    /// Mean minibatch objective over the last local epoch.
    pub train_loss: f64,
}

/// Seed of the model a task starts from when a client opens a fresh one.
/// Shared by all clients so fresh models agree across the federation.
pub fn fresh_model_seed(experiment_seed: u64, task_position: usize) -> u64 {
    derive_seed(experiment_seed, Stream::ModelInit, &[task_position as u64])
}

impl ClientState {
    pub fn new(client_id: usize) -> Self {
        ClientState {
            client_id,
            pool: Vec::new(),
            snapshots: Vec::new(),
            current_rho: Vec::new(),
            bindings: BTreeMap::new(),
            current_task: None,
            active: false,
            reports: BTreeMap::new(),
        }
    }

    pub fn bound_index(&self) -> Option<usize> {
        self.current_task.and_then(|t| self.bindings.get(&t).copied())
    }

    pub fn bound_model(&self) -> Option<&PersonalModel> {
        self.bound_index().map(|i| &self.pool[i])
    }

    /// Handles the arrival of task `task_position`.
    ///
    /// Returns `None` when the client holds no data for the task; it then
    /// sits the task out and gets no binding.
    pub fn begin_task(
        &mut self,
        task_position: usize,
        shard: &[&Sample],
        policy: TaskPolicy,
        arch: &ArchSpec,
        experiment_seed: u64,
    ) -> Result<Option<MatchingReport>> {
        self.current_task = Some(task_position);
        self.snapshots.clear();
        self.current_rho.clear();
        if shard.is_empty() {
            self.active = false;
            return Ok(None);
        }
        self.active = true;

        let fresh = || PersonalModel::init(arch, fresh_model_seed(experiment_seed, task_position));
        let d = self.pool.len();

        let report = match policy {
            TaskPolicy::Matching {
                lambda,
                max_pool_size,
                ..
            } => {
                let rho = matching_intensity(&self.pool, shard)?;
                select_strategy(&rho, lambda, d, max_pool_size)?
            }
            TaskPolicy::SingleModel => MatchingReport {
                rho: Vec::new(),
                lambda: 0.0,
                decision: if d == 0 { Decision::NewModel } else { Decision::Reuse(0) },
                budget_forced: false,
            },
            TaskPolicy::AlwaysNew | TaskPolicy::SharedTrunk => MatchingReport {
                rho: Vec::new(),
                lambda: 1.0,
                decision: Decision::NewModel,
                budget_forced: false,
            },
        };

        let bound = match report.decision {
            Decision::Reuse(m) => m,
            Decision::NewModel => {
                let model = match (policy, self.pool.last()) {
                    (TaskPolicy::SharedTrunk, Some(prev)) => {
                        let mut m = prev.clone();
                        m.cls_head = fresh()?.cls_head;
                        m
                    }
                    _ => fresh()?,
                };
                self.pool.push(model);
                self.pool.len() - 1
            }
        };
        self.bindings.insert(task_position, bound);

        if let TaskPolicy::Matching { include_self, .. } = policy {
            for (i, model) in self.pool.iter().enumerate() {
                if i == bound && !include_self {
                    continue;
                }
                // A just-created model has no intensity entry.
                if let Some(&r) = report.rho.get(i) {
                    self.snapshots.push(model.to_flat());
                    self.current_rho.push(r);
                }
            }
        }
        self.reports.insert(task_position, report.clone());
        Ok(Some(report))
    }

    /// Runs `E` local epochs on the bound model, starting from `global` when
    /// the server has one for this task.
    ///
    /// Each minibatch takes one joint step on classification cross-entropy,
    /// auxiliary binary cross-entropy over the batch and an equal number of
    /// synthesized negatives, and the migration penalty.
    pub fn local_train_round(
        &mut self,
        global: Option<&PersonalModel>,
        shard: &[&Sample],
        params: &TrainParams,
        experiment_seed: u64,
        round: usize,
    ) -> Result<Option<LocalUpdate>> {
        let (Some(task), Some(bound)) = (self.current_task, self.bound_index()) else {
            return Ok(None);
        };
        if !self.active || shard.is_empty() {
            return Ok(None);
        }
        if params.batch_size == 0 {
            return Err(Error::input("batch size must be positive"));
        }
        let mut model = match global {
            Some(g) => {
                if !g.is_congruent(&self.pool[bound]) {
                    return Err(Error::Invariant("global parameters do not match the pool architecture".into()));
                }
                g.clone()
            }
            None => self.pool[bound].clone(),
        };

        let sampler = NegativeSampler::fit(params.negatives, shard.iter().copied())?;
        let mut order: Vec<&Sample> = shard.to_vec();
        let mut neg_buf = Vec::new();
        let mut last_epoch_loss = 0.0;
        let mut flat = Vec::new();

        for epoch in 0..params.epochs {
            let mut rng = stream_rng(
                experiment_seed,
                Stream::LocalTrain,
                &[self.client_id as u64, task as u64, round as u64, epoch as u64],
            );
            order.copy_from_slice(shard);
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(params.batch_size) {
                let batch = balanced_batch(chunk, &sampler, &mut rng, &mut neg_buf);
                let (mut loss, mut grads) = model.loss_and_grad(&batch, LossSpec::Joint)?;
                if !self.snapshots.is_empty() {
                    flat.clear();
                    flat.extend(model.values().copied());
                    loss += migration_loss(&flat, &self.snapshots, &self.current_rho)?;
                    add_migration_grad(&mut grads, &flat, &self.snapshots, &self.current_rho);
                }
                model.sgd_step(&grads, params.lr, params.weight_decay);
                epoch_loss += loss;
                batches += 1;
            }
            last_epoch_loss = epoch_loss / batches as f64;
        }
        if !model.is_finite() {
            return Err(Error::Invariant(format!(
                "client {} diverged on task {task} round {round}",
                self.client_id
            )));
        }
        self.pool[bound] = model.clone();
        Ok(Some(LocalUpdate {
            client_id: self.client_id,
            task_id: task,
            model,
            num_samples: shard.len(),
            train_loss: last_epoch_loss,
        }))
    }

    /// Target-task objective on the shard: mean cross-entropy of the bound
    /// model plus its migration penalty. Deterministic (no negatives).
    pub fn local_objective(&self, model: &PersonalModel, shard: &[&Sample]) -> Result<f64> {
        let examples: Vec<_> = shard
            .iter()
            .map(|s| crate::nn::Example::class(&s.x, s.y))
            .collect();
        let ce = model.loss(&examples, LossSpec::Cls)?;
        let km = migration_loss(&model.to_flat(), &self.snapshots, &self.current_rho)?;
        Ok(ce + km)
    }

    /// Installs the task's final global parameters into the bound model.
    pub fn finish_task(&mut self, global: &PersonalModel, shared_trunk: bool) {
        let Some(bound) = self.bound_index() else {
            return;
        };
        self.pool[bound] = global.clone();
        if shared_trunk {
            for m in &mut self.pool {
                m.trunk = global.trunk.clone();
            }
        }
        self.snapshots.clear();
        self.current_rho.clear();
    }
}

fn add_migration_grad(grads: &mut GradientSet, w: &[f64], snapshots: &[Vec<f64>], rho: &[f64]) {
    for (s, r) in snapshots.iter().zip(rho) {
        for ((g, wi), si) in grads.values_mut().zip(w).zip(s) {
            *g += 2.0 * r * (wi - si);
        }
    }
}

/// Versioned binary record of a client state.
///
/// ```text
/// magic "PFCS", version u32, client_id u32,
/// n_models u32, each: byte length u64 + model checkpoint record,
/// n_bindings u32, each: task u32, pool index u32
/// ```
/// Matching reports go to a JSON sidecar (see [`ClientSidecar`]).
pub mod state_format {
    use super::*;
    use crate::nn::checkpoint::{self, read_u32, read_u64, write_u32, write_u64};

    pub const MAGIC: &[u8; 4] = b"PFCS";
    pub const VERSION: u32 = 1;

    pub fn encode(state: &ClientState) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        let w = &mut buf;
        write_u32(w, VERSION).expect("vec write");
        write_u32(w, state.client_id as u32).expect("vec write");
        write_u32(w, state.pool.len() as u32).expect("vec write");
        for m in &state.pool {
            let bytes = checkpoint::encode(m);
            write_u64(w, bytes.len() as u64).expect("vec write");
            w.extend_from_slice(&bytes);
        }
        write_u32(w, state.bindings.len() as u32).expect("vec write");
        for (&t, &i) in &state.bindings {
            write_u32(w, t as u32).expect("vec write");
            write_u32(w, i as u32).expect("vec write");
        }
        buf
    }

    fn corrupt(msg: impl Into<String>) -> Error {
        Error::Data(format!("client state: {}", msg.into()))
    }

    pub fn decode(bytes: &[u8]) -> Result<ClientState> {
        let r = &mut &bytes[..];
        if r.len() < 4 || &r[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        *r = &r[4..];
        let io = |e: std::io::Error| corrupt(e.to_string());
        let version = read_u32(r).map_err(io)?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let client_id = read_u32(r).map_err(io)? as usize;
        let n_models = read_u32(r).map_err(io)? as usize;
        let mut state = ClientState::new(client_id);
        for _ in 0..n_models {
            let len = read_u64(r).map_err(io)? as usize;
            if len > r.len() {
                return Err(corrupt("truncated model record"));
            }
            let (head, tail) = r.split_at(len);
            state.pool.push(checkpoint::decode(head)?);
            *r = tail;
        }
        let n_bind = read_u32(r).map_err(io)? as usize;
        for _ in 0..n_bind {
            let t = read_u32(r).map_err(io)? as usize;
            let i = read_u32(r).map_err(io)? as usize;
            if i >= state.pool.len() {
                return Err(corrupt(format!("binding {t} → {i} outside pool")));
            }
            state.bindings.insert(t, i);
        }
        if !r.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", r.len())));
        }
        Ok(state)
    }
}

/// JSON companion of a serialized client state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSidecar {
    pub client_id: usize,
    pub reports: BTreeMap<usize, MatchingReport>,
}

impl ClientSidecar {
    pub fn of(state: &ClientState) -> Self {
        ClientSidecar {
            client_id: state.client_id,
            reports: state.reports.clone(),
        }
    }
}

#[cfg(test)]
mod tests;
