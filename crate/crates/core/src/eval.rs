//! Ensemble inference over a client's pool and experiment metrics.

use serde::{Deserialize, Serialize};

use crate::client::ClientState;
use crate::data::{Sample, TaskDataset};
use crate::error::{Error, Result};
use crate::nn::{softmax, PersonalModel};

/// Below this total auxiliary score the ensemble falls back to uniform weights.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Normalized per-sample ensemble weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleWeights {
    pub alpha: Vec<f64>,
    /// True when the raw scores summed below [`WEIGHT_FLOOR`].
    pub uniform_fallback: bool,
}

impl EnsembleWeights {
    /// `α̂_i = s_i / Σ_j s_j`, or `1/d` each when the sum vanishes.
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::input("ensemble needs at least one model"));
        }
        let sum: f64 = scores.iter().sum();
        if sum < WEIGHT_FLOOR {
            let d = scores.len() as f64;
            return Ok(EnsembleWeights {
                alpha: vec![1.0 / d; scores.len()],
                uniform_fallback: true,
            });
        }
        Ok(EnsembleWeights {
            alpha: scores.iter().map(|s| s / sum).collect(),
            uniform_fallback: false,
        })
    }
}

pub fn ensemble_weights(pool: &[PersonalModel], x: &[f64]) -> Result<EnsembleWeights> {
    let scores = pool
        .iter()
        .map(|m| m.aux_score(x))
        .collect::<Result<Vec<_>>>()?;
    EnsembleWeights::from_scores(&scores)
}

/// Class distribution of the weighted ensemble: `Σ_i α̂_i · softmax(w_i(x))`.
pub fn ensemble_predict(pool: &[PersonalModel], x: &[f64]) -> Result<Vec<f64>> {
    ensemble_predict_weighted(pool, x).map(|(p, _)| p)
}

/// [`ensemble_predict`] that also returns the weights it used.
pub fn ensemble_predict_weighted(pool: &[PersonalModel], x: &[f64]) -> Result<(Vec<f64>, EnsembleWeights)> {
    if pool.is_empty() {
        return Err(Error::input("ensemble needs at least one model"));
    }
    let mut scores = Vec::with_capacity(pool.len());
    let mut dists = Vec::with_capacity(pool.len());
    for m in pool {
        let f = m.forward(x)?;
        scores.push(f.aux_score);
        dists.push(softmax(&f.class_logits));
    }
    let weights = EnsembleWeights::from_scores(&scores)?;
    let mut probs = vec![0.0; pool[0].arch.num_classes];
    for (a, dist) in weights.alpha.iter().zip(&dists) {
        for (p, q) in probs.iter_mut().zip(dist) {
            *p += a * q;
        }
    }
    Ok((probs, weights))
}

/// How a client turns its pool into one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceRule {
    /// Auxiliary-weighted ensemble over the whole pool.
    Ensemble,
    /// The model bound to the sample's task (task id supplied by the harness).
    OracleTask,
    /// The first pooled model.
    Single,
}

/// Predictive distribution for one sample of the task at `task_position`.
pub fn predict(state: &ClientState, rule: InferenceRule, task_position: usize, x: &[f64]) -> Result<Vec<f64>> {
    predict_flagged(state, rule, task_position, x).map(|(p, _)| p)
}

/// Second value: whether the ensemble fell back to uniform weights.
fn predict_flagged(state: &ClientState, rule: InferenceRule, task_position: usize, x: &[f64]) -> Result<(Vec<f64>, bool)> {
    if state.pool.is_empty() {
        return Err(Error::input(format!("client {} has an empty pool", state.client_id)));
    }
    let p = match rule {
        InferenceRule::Ensemble => {
            let (p, w) = ensemble_predict_weighted(&state.pool, x)?;
            return Ok((p, w.uniform_fallback));
        }
        InferenceRule::Single => state.pool[0].class_probs(x),
        InferenceRule::OracleTask => {
            // A task the client sat out has no binding; its newest model stands in.
            let idx = state
                .bindings
                .get(&task_position)
                .copied()
                .unwrap_or(state.pool.len() - 1);
            state.pool[idx].class_probs(x)
        }
    };
    Ok((p?, false))
}

fn argmax(p: &[f64]) -> usize {
    crate::matching::argmax_lowest(p).expect("non-empty distribution")
}

/// Top-1 accuracy of the client on each supplied test set; `test_sets[m]` is
/// the client's `m`-th task. Returns `None` for a client with an empty pool.
pub fn evaluate_client(state: &ClientState, rule: InferenceRule, test_sets: &[&[Sample]]) -> Result<Option<Vec<f64>>> {
    Ok(evaluate_client_detailed(state, rule, test_sets)?.map(|e| e.accuracies))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientEvaluation {
    pub accuracies: Vec<f64>,
    /// Test samples on which the ensemble used uniform weights.
    pub uniform_fallbacks: usize,
}

pub fn evaluate_client_detailed(
    state: &ClientState,
    rule: InferenceRule,
    test_sets: &[&[Sample]],
) -> Result<Option<ClientEvaluation>> {
    if state.pool.is_empty() {
        return Ok(None);
    }
    let mut uniform_fallbacks = 0;
    let mut accuracies = Vec::with_capacity(test_sets.len());
    for (m, samples) in test_sets.iter().enumerate() {
        if samples.is_empty() {
            return Err(Error::Data(format!("test set for task position {m} is empty")));
        }
        let mut correct = 0usize;
        for s in samples.iter() {
            let (p, fell_back) = predict_flagged(state, rule, m, &s.x)?;
            uniform_fallbacks += fell_back as usize;
            if argmax(&p) == s.y {
                correct += 1;
            }
        }
        accuracies.push(correct as f64 / samples.len() as f64);
    }
    Ok(Some(ClientEvaluation {
        accuracies,
        uniform_fallbacks,
    }))
}

/// Mean negative log-likelihood of the client's predictions over labelled samples.
pub fn mean_nll(state: &ClientState, rule: InferenceRule, task_position: usize, samples: &[&Sample]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    for s in samples {
        let p = predict(state, rule, task_position, &s.x)?;
        total -= p[s.y].max(1e-300).ln();
    }
    Ok((total, samples.len()))
}

/// Accuracy matrix and its summaries.
///
/// `a[n][m]` is the accuracy on task `m` after finishing task `n`, for `m ≤ n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsMatrix {
    pub a: Vec<Vec<f64>>,
    /// Mean of the last row.
    pub avg_final: f64,
    /// `a[n][n]`: accuracy on each task when it was current.
    pub diag: Vec<f64>,
    /// `max_n a[n][m] − a[N][m]` per task.
    pub forgetting: Vec<f64>,
    /// Sample-weighted mean negative log-likelihood over every client's
    /// training data for every task, after the final task.
    pub global_objective: Option<f64>,
}

impl MetricsMatrix {
    pub fn from_grid(a: Vec<Vec<f64>>) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::Invariant("accuracy grid is empty".into()));
        }
        for (n, row) in a.iter().enumerate() {
            if row.len() != n + 1 {
                return Err(Error::Invariant(format!(
                    "accuracy grid row {n} has {} cells, expected {}",
                    row.len(),
                    n + 1
                )));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Invariant(format!("accuracy outside [0, 1] in row {n}")));
            }
        }
        let last = a.last().expect("non-empty");
        let avg_final = last.iter().sum::<f64>() / last.len() as f64;
        let diag = a.iter().enumerate().map(|(n, row)| row[n]).collect();
        let forgetting = (0..last.len())
            .map(|m| {
                let best = a[m..].iter().map(|row| row[m]).fold(f64::NEG_INFINITY, f64::max);
                best - last[m]
            })
            .collect();
        Ok(MetricsMatrix {
            a,
            avg_final,
            diag,
            forgetting,
            global_objective: None,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.a.len()
    }

    pub fn mean_forgetting(&self) -> f64 {
        // The final task cannot have been forgotten yet.
        let n = self.forgetting.len();
        if n <= 1 {
            return 0.0;
        }
        self.forgetting[..n - 1].iter().sum::<f64>() / (n - 1) as f64
    }
}

/// Client-weighted accuracy grid.
///
/// `per_client[k][n]` holds client `k`'s accuracies after task `n` (length
/// `n + 1`, or `None` if the client was skipped) and `weights[k][m]` the size
/// of its task-`m` test set.
pub fn build_metrics(per_client: &[Vec<Option<Vec<f64>>>], weights: &[Vec<f64>]) -> Result<MetricsMatrix> {
    if per_client.is_empty() || per_client.len() != weights.len() {
        return Err(Error::Invariant("metrics need one weight row per client".into()));
    }
    let n_tasks = per_client[0].len();
    let mut grid = Vec::with_capacity(n_tasks);
    for n in 0..n_tasks {
        let mut row = Vec::with_capacity(n + 1);
        for m in 0..=n {
            let mut num = 0.0;
            let mut den = 0.0;
            for (k, rows) in per_client.iter().enumerate() {
                if rows.len() != n_tasks {
                    return Err(Error::Invariant(format!("client {k} has {} evaluation rows", rows.len())));
                }
                let Some(accs) = &rows[n] else {
                    continue;
                };
                let acc = accs
                    .get(m)
                    .ok_or_else(|| Error::Invariant(format!("missing cell ({n}, {m}) for client {k}")))?;
                let w = *weights[k]
                    .get(m)
                    .ok_or_else(|| Error::Invariant(format!("missing weight for client {k} task {m}")))?;
                num += w * acc;
                den += w;
            }
            if den <= 0.0 {
                return Err(Error::Invariant(format!("no client evaluated cell ({n}, {m})")));
            }
            row.push(num / den);
        }
        grid.push(row);
    }
    MetricsMatrix::from_grid(grid)
}

/// Test sets of a client's tasks in the order the client met them.
pub fn client_test_sets<'a>(tasks: &'a [TaskDataset], order: &[usize], upto: usize) -> Vec<&'a [Sample]> {
    order[..=upto].iter().map(|&d| tasks[d].test.as_slice()).collect()
}
