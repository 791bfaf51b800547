//! Server-side orchestration: client sampling, broadcast, aggregation and the
//! per-task round schedule, for the method and every baseline.

mod config;

pub use config::{clients_per_round, FederationConfig, Mode};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{ClientState, LocalUpdate};
use crate::data::{build_task_stream, dirichlet_partition, ClientShard, HeterogeneityConfig, Sample, TaskDataset};
use crate::error::{Error, Result};
use crate::eval::{self, build_metrics, MetricsMatrix};
use crate::matching::{Decision, MatchingReport};
use crate::nn::PersonalModel;
use crate::rng::{stream_rng, Rng, Stream};

/// Uniform sample of `max(1, ⌊C·K⌋)` distinct client ids, in ascending order.
pub fn sample_clients(num_clients: usize, active_fraction: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    if num_clients == 0 {
        return Err(Error::input("cannot sample from zero clients"));
    }
    let m = clients_per_round(num_clients, active_fraction);
    let mut ids = index::sample(rng, num_clients, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Sample-weighted mean of the updates' parameters.
///
/// Computed as `w_0 + Σ_k (n_k/N)(w_k − w_0)`, which returns identical
/// payloads unchanged bit for bit.
pub fn aggregate(updates: &[LocalUpdate]) -> Result<PersonalModel> {
    let first = updates
        .first()
        .ok_or_else(|| Error::input("aggregation needs at least one update"))?;
    if updates.iter().any(|u| !u.model.is_congruent(&first.model)) {
        return Err(Error::Invariant("aggregated payloads differ in architecture".into()));
    }
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(Error::Invariant("aggregated updates carry no samples".into()));
    }
    let mut out = first.model.clone();
    let base: Vec<f64> = first.model.to_flat();
    let mut acc = vec![0.0; base.len()];
    for u in &updates[1..] {
        let w = u.num_samples as f64 / total as f64;
        for ((a, v), b) in acc.iter_mut().zip(u.model.values()).zip(&base) {
            *a += w * (v - b);
        }
    }
    for ((o, a), b) in out.values_mut().zip(&acc).zip(&base) {
        *o = b + a;
    }
    Ok(out)
}

/// The server's model for the current task.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModelSlot {
    pub task: usize,
    pub parameters: PersonalModel,
    /// Rounds aggregated into `parameters` so far (1-based).
    pub round: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningKind {
    /// The client holds no data for the task and sits it out.
    InactiveClient,
    /// Every sampled client was inactive; the previous global carries over.
    NoActiveUpdates,
    /// Some test samples got uniform ensemble weights.
    UniformEnsembleFallback,
}

/// One line of the JSONL event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Round {
        round: usize,
        task: usize,
        mode: Mode,
        sampled_clients: Vec<usize>,
        /// `null` when no client trained this round.
        train_loss_mean: Option<f64>,
        /// `null` until the task has a global model.
        global_param_norm: Option<f64>,
    },
    Matching {
        client: usize,
        task: usize,
        rho: Vec<f64>,
        lambda: f64,
        decision: Decision,
        budget_forced: bool,
    },
    Warning {
        kind: WarningKind,
        task: usize,
        round: Option<usize>,
        client: Option<usize>,
        message: String,
    },
}

impl Event {
    fn matching(client: usize, task: usize, r: &MatchingReport) -> Self {
        Event::Matching {
            client,
            task,
            rho: r.rho.clone(),
            lambda: r.lambda,
            decision: r.decision,
            budget_forced: r.budget_forced,
        }
    }
}

/// Global parameters after one round, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub task: usize,
    pub round: usize,
    pub global: Option<Vec<f64>>,
}

/// Everything [`run_task`] needs besides the client states.
pub struct TaskContext<'a> {
    pub config: &'a FederationConfig,
    pub task: usize,
    /// `shards[k]`: client `k`'s training samples for this task.
    pub shards: &'a [Vec<&'a Sample>],
    /// The previous task's final global model, if any.
    pub previous: Option<&'a PersonalModel>,
    pub workers: &'a rayon::ThreadPool,
}

pub struct TaskOutcome {
    pub slot: Option<GlobalModelSlot>,
    pub events: Vec<Event>,
    pub rounds: Vec<RoundRecord>,
}

/// Runs the `T` rounds of one task on clients that have already called
/// `begin_task`, then installs the final global model into every bound model.
pub fn run_task(ctx: &TaskContext<'_>, states: &mut [ClientState], record_rounds: bool) -> Result<TaskOutcome> {
    let cfg = ctx.config;
    let params = cfg.train_params();
    let frozen = cfg.mode == Mode::SourceOnly && ctx.task > 0;
    let mut slot: Option<GlobalModelSlot> = None;
    let mut events = Vec::with_capacity(cfg.rounds_per_task);
    let mut rounds = Vec::new();

    for round in 0..cfg.rounds_per_task {
        let mut rng = stream_rng(cfg.seed, Stream::Sampling, &[ctx.task as u64, round as u64]);
        let sampled = sample_clients(cfg.num_clients, cfg.active_fraction, &mut rng)?;

        let mut train_loss_mean = None;
        if !frozen {
            let global = slot.as_ref().map(|s| &s.parameters);
            let mut chosen: Vec<&mut ClientState> = states
                .iter_mut()
                .filter(|s| sampled.binary_search(&s.client_id).is_ok())
                .collect();
            let results: Vec<Result<Option<LocalUpdate>>> = ctx.workers.install(|| {
                chosen
                    .par_iter_mut()
                    .map(|s| {
                        let shard = &ctx.shards[s.client_id];
                        s.local_train_round(global, shard, &params, cfg.seed, round)
                    })
                    .collect()
            });
            let mut updates = Vec::with_capacity(results.len());
            for r in results {
                if let Some(u) = r? {
                    updates.push(u);
                }
            }
            if updates.is_empty() {
                events.push(Event::Warning {
                    kind: WarningKind::NoActiveUpdates,
                    task: ctx.task,
                    round: Some(round + 1),
                    client: None,
                    message: "every sampled client was inactive; global parameters carried forward".into(),
                });
            } else {
                let loss = updates.iter().map(|u| u.train_loss).sum::<f64>() / updates.len() as f64;
                train_loss_mean = Some(loss);
                slot = Some(GlobalModelSlot {
                    task: ctx.task,
                    parameters: aggregate(&updates)?,
                    round: round + 1,
                });
            }
        }

        let current = slot.as_ref().map(|s| &s.parameters).or(ctx.previous);
        events.push(Event::Round {
            round: round + 1,
            task: ctx.task,
            mode: cfg.mode,
            sampled_clients: sampled,
            train_loss_mean,
            global_param_norm: current.map(|m| m.l2_norm()),
        });
        if record_rounds {
            rounds.push(RoundRecord {
                task: ctx.task,
                round: round + 1,
                global: current.map(|m| m.to_flat()),
            });
        }
    }

    if let Some(s) = &slot {
        let shared = cfg.mode == Mode::Sharing;
        for st in states.iter_mut() {
            st.finish_task(&s.parameters, shared);
        }
    }
    Ok(TaskOutcome { slot, events, rounds })
}

/// Inputs derived from the config before round 1.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub tasks: Vec<TaskDataset>,
    /// `orders[k][n]`: the domain client `k` meets at task position `n`.
    pub orders: Vec<Vec<usize>>,
    /// `shards[d][k]`: client `k`'s part of domain `d`.
    pub shards: Vec<Vec<ClientShard>>,
}

impl ExperimentData {
    pub fn build(config: &FederationConfig) -> Result<Self> {
        config.validate()?;
        let tasks = config.data.build_tasks(config.seed)?;
        Self::from_tasks(config, tasks)
    }

    /// Uses pre-generated task datasets (for example ones read from disk).
    pub fn from_tasks(config: &FederationConfig, tasks: Vec<TaskDataset>) -> Result<Self> {
        config.validate()?;
        if tasks.len() != config.num_tasks() {
            return Err(Error::Data(format!(
                "{} task datasets for {} configured domains",
                tasks.len(),
                config.num_tasks()
            )));
        }
        let arch = config.arch()?;
        for t in &tasks {
            t.validate()?;
            if t.input_dim != arch.input_dim || t.num_classes != arch.num_classes {
                return Err(Error::Data(format!("task {} does not match the configured shapes", t.task_id)));
            }
        }
        let orders = build_task_stream(tasks.len(), config.num_clients, config.stream_mode, config.seed)?;
        let het = HeterogeneityConfig {
            alpha: config.alpha,
            num_clients: config.num_clients,
            seed: config.seed,
        };
        let shards = tasks
            .iter()
            .map(|t| dirichlet_partition(t, &het))
            .collect::<Result<Vec<_>>>()?;
        Ok(ExperimentData { tasks, orders, shards })
    }

    pub fn client_shard(&self, client: usize, position: usize) -> Vec<&Sample> {
        let d = self.orders[client][position];
        self.shards[d][client].samples(&self.tasks[d]).collect()
    }

    pub fn client_test_sets(&self, client: usize, upto: usize) -> Vec<&[Sample]> {
        eval::client_test_sets(&self.tasks, &self.orders[client], upto)
    }

    /// `[k][n]`: size of the test set client `k` is scored on at position `n`.
    pub fn test_weights(&self) -> Vec<Vec<f64>> {
        self.orders
            .iter()
            .map(|o| o.iter().map(|&d| self.tasks[d].test.len() as f64).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Worker threads for client training; `None` uses rayon's default.
    pub threads: Option<usize>,
    /// Keep the flattened global parameters after every round.
    pub record_rounds: bool,
}

pub fn worker_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n.max(1));
    }
    b.build()
        .map_err(|e| Error::Invariant(format!("could not start worker threads: {e}")))
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub metrics: MetricsMatrix,
    pub events: Vec<Event>,
    /// Client states after each task.
    pub checkpoints: Vec<Vec<ClientState>>,
    /// Final global model of each task (`None` if nothing was aggregated).
    pub globals: Vec<Option<PersonalModel>>,
    pub rounds: Vec<RoundRecord>,
    pub pool_size_mean: f64,
    /// Parameters stored across all clients' pools at the end.
    pub param_count_total: usize,
}

/// Parameters a client actually stores. Under the sharing baseline the trunk
/// is held once.
pub fn stored_param_count(state: &ClientState, mode: Mode) -> usize {
    let Some(first) = state.pool.first() else {
        return 0;
    };
    let arch = &first.arch;
    match mode {
        Mode::Sharing => {
            arch.trunk_param_count()
                + state.pool.len() * (arch.cls_head_param_count() + arch.aux_head_param_count())
        }
        _ => state.pool.len() * arch.param_count(),
    }
}

/// Evaluates every client after task position `n`. Clients with an empty pool
/// get `None` and zero weight.
pub fn evaluate_all(
    config: &FederationConfig,
    data: &ExperimentData,
    states: &[ClientState],
    n: usize,
    workers: &rayon::ThreadPool,
) -> Result<(Vec<Option<Vec<f64>>>, usize)> {
    let rule = config.mode.inference_rule();
    let results: Vec<Result<Option<eval::ClientEvaluation>>> = workers.install(|| {
        states
            .par_iter()
            .map(|s| eval::evaluate_client_detailed(s, rule, &data.client_test_sets(s.client_id, n)))
            .collect()
    });
    let mut accs = Vec::with_capacity(states.len());
    let mut fallbacks = 0;
    for r in results {
        let e = r?;
        fallbacks += e.as_ref().map_or(0, |e| e.uniform_fallbacks);
        accs.push(e.map(|e| e.accuracies));
    }
    Ok((accs, fallbacks))
}

/// Sample-weighted mean NLL of every client's predictions on its own
/// training data for every task seen so far.
pub fn global_objective(config: &FederationConfig, data: &ExperimentData, states: &[ClientState]) -> Result<Option<f64>> {
    let rule = config.mode.inference_rule();
    let mut total = 0.0;
    let mut count = 0usize;
    for s in states {
        if s.pool.is_empty() {
            continue;
        }
        for n in 0..config.num_tasks() {
            let shard = data.client_shard(s.client_id, n);
            let (sum, c) = eval::mean_nll(s, rule, n, &shard)?;
            total += sum;
            count += c;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Builds the data from the config and runs every task in sequence.
pub fn run_experiment(config: &FederationConfig, options: RunOptions) -> Result<ExperimentOutput> {
    let data = ExperimentData::build(config)?;
    run_experiment_with_data(config, &data, options)
}

pub fn run_experiment_with_data(
    config: &FederationConfig,
    data: &ExperimentData,
    options: RunOptions,
) -> Result<ExperimentOutput> {
    config.validate()?;
    let arch = config.arch()?;
    let workers = worker_pool(options.threads)?;
    let policy = config.policy();
    let k = config.num_clients;

    let mut states: Vec<ClientState> = (0..k).map(ClientState::new).collect();
    let mut events = Vec::new();
    let mut checkpoints = Vec::with_capacity(config.num_tasks());
    let mut globals: Vec<Option<PersonalModel>> = Vec::with_capacity(config.num_tasks());
    let mut rounds = Vec::new();
    let mut per_client: Vec<Vec<Option<Vec<f64>>>> = vec![Vec::new(); k];

    for n in 0..config.num_tasks() {
        let shards: Vec<Vec<&Sample>> = (0..k).map(|c| data.client_shard(c, n)).collect();
        for (st, shard) in states.iter_mut().zip(&shards) {
            match st.begin_task(n, shard, policy, &arch, config.seed)? {
                Some(report) if config.mode == Mode::Pfeddil => {
                    events.push(Event::matching(st.client_id, n, &report));
                }
                Some(_) => {}
                None => events.push(Event::Warning {
                    kind: WarningKind::InactiveClient,
                    task: n,
                    round: None,
                    client: Some(st.client_id),
                    message: "client holds no training data for this task".into(),
                }),
            }
        }

        let previous = globals.iter().rev().find_map(|g| g.as_ref());
        let ctx = TaskContext {
            config,
            task: n,
            shards: &shards,
            previous,
            workers: &workers,
        };
        let outcome = run_task(&ctx, &mut states, options.record_rounds)?;
        events.extend(outcome.events);
        rounds.extend(outcome.rounds);
        globals.push(outcome.slot.map(|s| s.parameters));

        let (accs, fallbacks) = evaluate_all(config, data, &states, n, &workers)?;
        if fallbacks > 0 {
            events.push(Event::Warning {
                kind: WarningKind::UniformEnsembleFallback,
                task: n,
                round: None,
                client: None,
                message: format!("{fallbacks} test predictions used uniform ensemble weights"),
            });
        }
        for (row, a) in per_client.iter_mut().zip(accs) {
            row.push(a);
        }
        checkpoints.push(states.clone());
    }

    let mut metrics = build_metrics(&per_client, &data.test_weights())?;
    metrics.global_objective = global_objective(config, data, &states)?;

    let pool_size_mean = states.iter().map(|s| s.pool.len() as f64).sum::<f64>() / k as f64;
    let param_count_total = states.iter().map(|s| stored_param_count(s, config.mode)).sum();
    Ok(ExperimentOutput {
        metrics,
        events,
        checkpoints,
        globals,
        rounds,
        pool_size_mean,
        param_count_total,
    })
}

/// Recomputes the accuracy grid from stored per-task client states.
pub fn metrics_from_checkpoints(
    config: &FederationConfig,
    data: &ExperimentData,
    checkpoints: &[Vec<ClientState>],
    threads: Option<usize>,
) -> Result<MetricsMatrix> {
    if checkpoints.len() != config.num_tasks() {
        return Err(Error::Data(format!(
            "{} checkpointed tasks for {} configured",
            checkpoints.len(),
            config.num_tasks()
        )));
    }
    let workers = worker_pool(threads)?;
    let k = config.num_clients;
    let mut per_client: Vec<Vec<Option<Vec<f64>>>> = vec![Vec::new(); k];
    for (n, states) in checkpoints.iter().enumerate() {
        if states.len() != k || states.iter().enumerate().any(|(i, s)| s.client_id != i) {
            return Err(Error::Data(format!("checkpoint of task {n} does not hold clients 0..{k}")));
        }
        let (accs, _) = evaluate_all(config, data, states, n, &workers)?;
        for (row, a) in per_client.iter_mut().zip(accs) {
            row.push(a);
        }
    }
    let mut metrics = build_metrics(&per_client, &data.test_weights())?;
    metrics.global_objective = global_objective(config, data, checkpoints.last().expect("non-empty"))?;
    Ok(metrics)
}
